"""Matplotlib figures written next to the CSV/JSON reports.

Uses the Agg backend; every function saves to ``path`` and closes its figure.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _image(x):
    return np.asarray(x, dtype=np.float64).reshape(np.shape(x)[-2:])


def plot_history(history, path):
    """Loss curves and mean output confidence per epoch."""
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_conf) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["mean_data_loss"] for r in history], "o-", label="data (Huber)")
    ax_loss.plot(epochs, [r["mean_total_loss"] for r in history], "s--", label="total")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(frameon=False)
    ax_conf.plot(epochs, [r["mean_output_conf"] for r in history], "o-", color="tab:green")
    ax_conf.set_xlabel("epoch")
    ax_conf.set_ylabel("mean output confidence")
    ax_conf.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_completion(sparse, conf_in, pred, conf_out, path, gt=None, title=None):
    """Panel of sparse input, (optional) ground truth, dense prediction and output confidence."""
    panels = [("sparse input", _image(sparse), "depth"), ("prediction", _image(pred), "depth")]
    if gt is not None:
        panels.insert(1, ("ground truth", _image(gt), "depth"))
    panels.append(("output confidence", _image(conf_out), "conf"))
    measured = _image(conf_in) > 0
    depth_vals = np.concatenate([_image(pred).ravel(), _image(sparse)[measured]])
    vmin, vmax = float(depth_vals.min()), float(depth_vals.max())

    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    for ax, (label, img, kind) in zip(axes, panels):
        if kind == "conf":
            im = ax.imshow(img, cmap="viridis", vmin=0, vmax=1, interpolation="nearest")
        else:
            shown = np.ma.masked_where(img <= 0, img) if label != "prediction" else img
            im = ax.imshow(shown, cmap="magma_r", vmin=vmin, vmax=vmax, interpolation="nearest")
        ax.set_title(label, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_error_map(pred, gt, valid, path):
    """Absolute error on valid pixels, log-scaled colour."""
    err = np.abs(_image(pred) - _image(gt))
    shown = np.ma.masked_where(_image(valid) <= 0, np.log10(err + 1e-3))
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(shown, cmap="inferno", interpolation="nearest")
    ax.set_title("log10 |error| [m]", fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
