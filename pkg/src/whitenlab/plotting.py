"""Figure rendering for the report-producing commands.

Each writer takes the in-memory report data and renders a PNG next to the
delimited output, so a run leaves both a machine-readable artifact and a
human-readable one.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_snd_reports(reports, axis_label: str, path):
    """Two panels against the sweep axis: disturbance (with stderr) and
    condition number of the normalized-output covariance."""
    fig, (ax_snd, ax_kappa) = plt.subplots(1, 2, figsize=(9, 3.6))
    by_kind = {}
    for r in reports:
        by_kind.setdefault(r.query.normalizer.kind, []).append(r)
    for kind, rows in by_kind.items():
        xs = [r.axis_value for r in rows]
        ax_snd.errorbar(
            xs,
            [r.snd_mean for r in rows],
            yerr=[r.snd_stderr for r in rows],
            marker="o",
            capsize=3,
            label=kind,
        )
        ax_kappa.plot(xs, [r.cond_number for r in rows], marker="s", label=kind)
    for ax, ylabel in ((ax_snd, "disturbance"), (ax_kappa, "condition number")):
        ax.set_xscale("log", base=2)
        ax.set_xlabel(axis_label)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend()
    ax_kappa.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_train_run(run, path):
    """Training loss and train/test error curves over iterations."""
    fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=(9, 3.6))
    its = range(len(run.train_loss))
    ax_loss.plot(its, run.train_loss, label="train loss")
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_err.plot(its, run.train_err, label="train error")
    if run.test_err:
        xs, ys = zip(*run.test_err)
        ax_err.plot(xs, ys, "--", label="test error")
    ax_err.set_xlabel("iteration")
    ax_err.set_ylabel("error")
    for ax in (ax_loss, ax_err):
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_bench_rows(rows, path):
    """Median wall-clock per operation as a horizontal bar chart."""
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(rows) + 1.5))
    labels = [r["op"] for r in rows]
    medians = [r["median_ms"] for r in rows]
    ax.barh(labels, medians)
    ax.set_xlabel("median wall-clock (ms)")
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
