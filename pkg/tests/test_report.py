import csv

from embrec import report
from embrec.evaluation import AblationCurve, EvalReport

PNG = b"\x89PNG\r\n\x1a\n"


def test_write_tsv_round_trip(tmp_path):
    p = report.write_tsv(tmp_path / "t.tsv", ("a", "b"), [(1, "x y"), (2, "z")])
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    assert rows == [["a", "b"], ["1", "x y"], ["2", "z"]]


def test_recall_rows_delta():
    b = EvalReport({1: 0.2, 20: 0.0}, 5, 50, label="RVI")
    m = EvalReport({1: 0.3, 20: 0.4}, 5, 50, label="m")
    rows = report.recall_rows(b, m)
    assert rows[0] == (1, "0.2000", "0.3000", "+50.0")
    assert rows[1][3] == "+nan"


def test_ablation_rows_one_per_point():
    curves = [AblationCurve([(0, 0.5), (10, 0.4)], 0, [0, 3]), AblationCurve([(0, 0.45), (10, 0.44)], 10, [0, 1])]
    rows = report.ablation_rows(curves)
    assert len(rows) == 4 and rows[3][1:] == ("10", "10", "0.4400", 1)


def test_plots_are_pngs(tmp_path):
    b = EvalReport({1: 0.1, 5: 0.2, 20: 0.3}, 5, 50, label="RVI")
    m = EvalReport({1: 0.2, 5: 0.4, 20: 0.6}, 5, 50, label="model")
    curves = [AblationCurve([(0, 0.5), (10, 0.4)], 0, [0, 0]), AblationCurve([(0, 0.45), (10, 0.44)], 10, [0, 0])]
    metrics = [{"epoch": 1, "train_loss": 3.0, "val_recall_at_20": 0.1},
               {"epoch": 2, "train_loss": 2.0, "val_recall_at_20": 0.2}]
    paths = [report.plot_recall(b, m, tmp_path / "r.png"),
             report.plot_ablation(curves, tmp_path / "a.png", selected=1),
             report.plot_training(metrics, tmp_path / "t.png")]
    for p in paths:
        assert p.read_bytes()[:8] == PNG
