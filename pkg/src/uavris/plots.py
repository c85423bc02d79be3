"""Report figures rendered alongside the delimited outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_loss_curve(path, losses):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses, lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pr_curve(path, pr):
    thresholds = sorted(pr)
    values = [pr[t] for t in thresholds]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(thresholds, values, marker="o")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("precision (%)")
    ax.set_ylim(-2, 102)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_class_iou(path, per_class_iou):
    names = list(per_class_iou)
    values = [per_class_iou[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 102)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gradcheck_bars(path, reports):
    names = [r.name for r in reports]
    errs = [max(r.max_rel_err, 1e-16) for r in reports]
    fig, ax = plt.subplots(figsize=(max(8, 0.35 * len(names)), 4.5))
    colors = ["tab:blue" if r.passed else "tab:red" for r in reports]
    ax.bar(range(len(names)), errs, color=colors)
    ax.axhline(reports[0].tolerance, color="k", ls="--", lw=1, label="tolerance")
    ax.set_yscale("log")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=75, ha="right", fontsize=7)
    ax.set_ylabel("max relative error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
