"""Figure rendering for the report-producing commands.

Each figure lands next to its delimited output (CSV/JSON) with the same
stem and a .png suffix.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_accuracy_histogram(accuracies: list[float], mean: float, ci95: float, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(accuracies, bins=20, range=(0.0, 1.0), color="#4878d0", edgecolor="white")
    ax.axvline(mean, color="#d65f5f", linewidth=2, label=f"mean {mean:.3f} ± {ci95:.3f}")
    ax.set_xlabel("episode accuracy")
    ax.set_ylabel("episodes")
    ax.set_title(f"{len(accuracies)} episodes")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_distance_histogram(
    aligned: list[float], unaligned: list[float], path
) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(unaligned, bins=40, alpha=0.6, color="#4878d0", label="without alignment")
    ax.hist(aligned, bins=40, alpha=0.6, color="#ee854a", label="with alignment")
    ax.set_xlabel("true-class reconstruction distance")
    ax.set_ylabel("queries")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
