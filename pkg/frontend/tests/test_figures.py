import os

import numpy as np
import pytest

from flowplots import cli
from flowplots.figures import (
    EmptyDataError,
    FigureSpec,
    MissingColumnError,
    RenderError,
    build_figure,
    load_curves,
    read_table,
    render,
    render_all,
)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def write_csv(path, header, rows, metadata="# config_hash=feed seed=3"):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")
        if metadata:
            f.write(metadata + "\n")
    return str(path)


DIAG_HEADER = ["experiment", "sweep_value", "value", "std_err"]


def drift_csv(path):
    rows = [
        ["drift_path_mse", 0.0, 0.0, 0.0],
        ["drift_path_mse", 0.5, 2.4, 0.1],
        ["drift_path_mse", 0.9, 6.1, 0.2],
        ["drift_velocity_mse", 0.0, 1.01, 0.04],
        ["drift_velocity_mse", 0.5, 1.8, 0.06],
        ["drift_velocity_mse", 0.9, 3.3, 0.1],
    ]
    return write_csv(path, DIAG_HEADER, rows)


def test_read_table_parses_header_rows_and_metadata(tmp_path):
    path = drift_csv(tmp_path / "diag_drift.csv")
    header, rows, metadata = read_table(path)
    assert header == DIAG_HEADER
    assert len(rows) == 6
    assert metadata == {"config_hash": "feed", "seed": "3"}


def test_series_column_splits_into_curves(tmp_path):
    path = drift_csv(tmp_path / "d.csv")
    spec = FigureSpec(inputs=(path,), x="sweep_value", y="value",
                      out=str(tmp_path / "d.png"), series="experiment")
    curves = load_curves(spec)
    assert [c.label for c in curves] == ["drift_path_mse", "drift_velocity_mse"]
    assert all(np.all(np.diff(c.x) > 0) for c in curves)
    fig = build_figure(spec)
    assert len(fig.axes[0].lines) == 2
    assert len(fig.axes[0].collections) == 2  # one shaded band per curve


def test_band_rendering_is_optional(tmp_path):
    path = write_csv(tmp_path / "n.csv", ["a", "b"], [[1, 2], [3, 4]])
    spec = FigureSpec(inputs=(path,), x="a", y="b", out=str(tmp_path / "n.png"))
    fig = build_figure(spec)
    assert len(fig.axes[0].lines) == 1
    assert len(fig.axes[0].collections) == 0  # no std_err column, no band


def test_multiple_inputs_get_one_curve_set_each(tmp_path):
    paths = tuple(
        write_csv(
            tmp_path / f"run{i}.csv",
            DIAG_HEADER,
            [["omega_sweep", w, 0.5 + 0.1 * i * w, 0.01] for w in (1.0, 2.0)],
        )
        for i in range(2)
    )
    spec = FigureSpec(inputs=paths, x="sweep_value", y="value",
                      out=str(tmp_path / "m.png"), series="experiment")
    curves = load_curves(spec)
    assert [c.label for c in curves] == ["run0:omega_sweep", "run1:omega_sweep"]


def test_missing_column_error_names_the_column(tmp_path):
    path = drift_csv(tmp_path / "d.csv")
    out = tmp_path / "missing.png"
    spec = FigureSpec(inputs=(path,), x="sweep_value", y="nope", out=str(out))
    with pytest.raises(MissingColumnError, match="nope"):
        render(spec)
    assert not out.exists()


def test_empty_rows_error_and_no_image(tmp_path):
    path = write_csv(tmp_path / "e.csv", DIAG_HEADER, [])
    out = tmp_path / "empty.png"
    spec = FigureSpec(inputs=(path,), x="sweep_value", y="value", out=str(out))
    with pytest.raises(EmptyDataError):
        render(spec)
    assert not out.exists()


def test_non_numeric_column_is_an_error(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["a", "b"], [["x", "1.0"]])
    spec = FigureSpec(inputs=(path,), x="a", y="b", out=str(tmp_path / "t.png"))
    with pytest.raises(RenderError, match="not numeric"):
        render(spec)


def test_render_writes_png_and_is_deterministic(tmp_path):
    path = drift_csv(tmp_path / "d.csv")
    outs = []
    for name in ("one.png", "two.png"):
        spec = FigureSpec(inputs=(path,), x="sweep_value", y="value",
                          out=str(tmp_path / name), series="experiment",
                          logy=True, title="drift")
        outs.append(render(spec))
    blobs = [open(p, "rb").read() for p in outs]
    assert blobs[0][:8] == PNG_MAGIC
    assert blobs[0] == blobs[1]


def test_log_axes_are_applied(tmp_path):
    path = drift_csv(tmp_path / "d.csv")
    spec = FigureSpec(inputs=(path,), x="sweep_value", y="value",
                      out=str(tmp_path / "l.png"), series="experiment",
                      logy=True)
    ax = build_figure(spec).axes[0]
    assert ax.get_yscale() == "log"
    assert ax.get_xscale() == "linear"


def test_render_all_covers_known_files(tmp_path):
    drift_csv(tmp_path / "diag_drift.csv")
    write_csv(
        tmp_path / "metrics.csv",
        ["step", "objective", "loss", "mean_residual_norm",
         "mean_target_norm", "omega_mean", "wall_ms"],
        [[10, "flowconsist", 0.9, 0.9, 1.0, 1.0, 3.0],
         [20, "flowconsist", 0.7, 0.8, 1.0, 1.0, 3.1]],
    )
    write_csv(tmp_path / "samples.csv", ["x0", "x1"], [[0.1, 0.2]])
    written = render_all(str(tmp_path))
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["diag_drift.png", "metrics.png"]  # samples.csv has no recipe
    assert all(open(p, "rb").read(1) for p in written)


def test_render_all_without_renderable_files_is_an_error(tmp_path):
    write_csv(tmp_path / "samples.csv", ["x0"], [[0.1]])
    with pytest.raises(RenderError, match="no renderable"):
        render_all(str(tmp_path))
    with pytest.raises(RenderError, match="not a directory"):
        render_all(str(tmp_path / "absent"))


def test_cli_render_and_exit_codes(tmp_path, capsys):
    path = drift_csv(tmp_path / "d.csv")
    out = tmp_path / "cli.png"
    code = cli.main([
        "render", "--csv", path, "--x", "sweep_value", "--y", "value",
        "--series", "experiment", "--out", str(out),
    ])
    assert code == 0
    assert out.exists()
    assert "wrote" in capsys.readouterr().out

    code = cli.main([
        "render", "--csv", path, "--x", "sweep_value", "--y", "absent",
        "--out", str(tmp_path / "bad.png"),
    ])
    assert code == 2
    assert "absent" in capsys.readouterr().err


def test_cli_render_all(tmp_path, capsys):
    drift_csv(tmp_path / "diag_drift.csv")
    out_dir = tmp_path / "figs"
    out_dir.mkdir()
    code = cli.main(["render-all", str(tmp_path), "--out-dir", str(out_dir)])
    assert code == 0
    assert (out_dir / "diag_drift.png").exists()
    assert cli.main(["render-all", str(tmp_path / "void")]) == 2


def test_cli_bad_arguments_exit_2(tmp_path):
    assert cli.main(["render", "--x", "a"]) == 2
    assert cli.main(["frobnicate"]) == 2
