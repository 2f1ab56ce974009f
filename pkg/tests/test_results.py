import json
import xml.etree.ElementTree as ET

import pytest

from evalblocks.config import ExperimentSpec
from evalblocks.errors import ConfigError, DataError
from evalblocks.results import ResultStore, markdown_table, render_barchart, report_table


def _spec(ds="d1", emb="e1", agg="none", ev="knn", fold=0):
    return ExperimentSpec(ds, emb, agg, ev, fold)


def fill_store(tmp_path, datasets=("d1", "d2"), embedders=("e1",), folds=5, auc=None):
    store = ResultStore(tmp_path / "results")
    for ds in datasets:
        for emb in embedders:
            for fold in range(folds):
                value = auc[fold] if auc else 0.5 + 0.1 * fold
                store.record_result(
                    _spec(ds, emb, fold=fold), "none",
                    {"accuracy": 0.8, "auc": value}, {"k": [20]},
                )
    return store


class TestStore:
    def test_record_round_trip(self, tmp_path):
        store = ResultStore(tmp_path / "results")
        store.record_result(_spec(), "none", {"accuracy": 0.9, "auc": 0.95}, {"k": [20]})
        records = store.load_records()
        assert len(records) == 1
        r = records[0]
        assert (r.dataset, r.embedder, r.channel, r.evaluation, r.fold) == (
            "d1", "e1", "none", "knn", 0,
        )
        assert r.metrics == {"accuracy": 0.9, "auc": 0.95}

    def test_rerecord_overwrites_single_key(self, tmp_path):
        store = ResultStore(tmp_path / "results")
        store.record_result(_spec(), "none", {"accuracy": 0.1, "auc": 0.1})
        store.record_result(_spec(), "none", {"accuracy": 0.9, "auc": 0.9})
        records = store.load_records()
        assert len(records) == 1
        assert records[0].metrics["auc"] == 0.9

    def test_record_count_and_paths(self, tmp_path):
        store = fill_store(tmp_path)
        assert len(store.load_records()) == 10
        expected = store.record_path("d1", "e1", "none", "knn", 3)
        assert expected.exists()
        index = json.loads((store.records_dir / "index.json").read_text())
        assert len(index) == 10

    def test_null_metric_survives_round_trip(self, tmp_path):
        store = ResultStore(tmp_path / "results")
        store.record_result(_spec(), "none", {"accuracy": 1.0, "auc": None})
        assert store.load_records()[0].metrics["auc"] is None


class TestReportTable:
    def test_constant_auc_zero_std(self, tmp_path):
        store = fill_store(tmp_path, datasets=("d1",), auc=[0.8] * 5)
        table = report_table(store, ["dataset"])
        cell = table.rows[0].metrics["auc"]
        assert cell.mean == pytest.approx(0.8)
        assert cell.std == pytest.approx(0.0)
        assert (cell.n_defined, cell.n_total) == (5, 5)

    def test_null_fold_excluded_with_count(self, tmp_path):
        store = fill_store(tmp_path, datasets=("d1",), auc=[0.8, 0.8, 0.8, 0.8, 0.8])
        store.record_result(_spec(fold=2), "none", {"accuracy": 0.8, "auc": None})
        table = report_table(store, ["dataset"])
        cell = table.rows[0].metrics["auc"]
        assert (cell.n_defined, cell.n_total) == (4, 5)
        assert cell.mean == pytest.approx(0.8)

    def test_group_by_all_axes(self, tmp_path):
        store = fill_store(tmp_path, datasets=("d1", "d2"), embedders=("e1", "e2"))
        table = report_table(store, ["dataset", "embedder", "aggregation", "evaluation"])
        assert len(table.rows) == 4

    def test_axis_order_honoured(self, tmp_path):
        store = fill_store(tmp_path, datasets=("alpha", "beta"))
        table = report_table(store, ["dataset"], axis_order={"dataset": ["beta", "alpha"]})
        assert [r.key[0] for r in table.rows] == ["beta", "alpha"]

    def test_empty_store_rejected(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            report_table(ResultStore(tmp_path / "results"), ["dataset"])

    def test_unknown_axis_rejected(self, tmp_path):
        store = fill_store(tmp_path)
        with pytest.raises(ConfigError, match="unknown group axis"):
            report_table(store, ["model"])

    def test_markdown_contains_footnote_count(self, tmp_path):
        store = fill_store(tmp_path, datasets=("d1",))
        store.record_result(_spec(fold=0), "none", {"accuracy": 0.8, "auc": None})
        text = markdown_table(report_table(store, ["dataset"]))
        assert "(n=4/5)" in text
        assert text.startswith("| dataset |")


class TestBarchart:
    def _table(self, tmp_path, groups=2, bars=5):
        store = ResultStore(tmp_path / "results")
        for g in range(groups):
            for b in range(bars):
                for fold in range(3):
                    store.record_result(
                        _spec(ds=f"ds{g}", emb=f"emb{b}", fold=fold), "none",
                        {"auc": 0.5 + 0.05 * b + 0.01 * fold},
                    )
        return report_table(store, ["dataset", "embedder"])

    def test_structure_counts(self, tmp_path):
        table = self._table(tmp_path)
        out = tmp_path / "chart.svg"
        render_barchart(table, "auc", out)
        text = out.read_text()
        assert text.count('<rect class="bar"') == 10
        assert text.count('<path class="errorbar"') == 10
        ET.fromstring(text)

    def test_zero_std_bar_still_drawn(self, tmp_path):
        store = ResultStore(tmp_path / "results")
        for fold in range(3):
            store.record_result(_spec(fold=fold), "none", {"auc": 0.7})
        table = report_table(store, ["dataset"])
        out = tmp_path / "c.svg"
        render_barchart(table, "auc", out)
        assert out.read_text().count('<path class="errorbar"') == 1

    def test_full_scale_bar_reaches_axis_top(self, tmp_path):
        store = ResultStore(tmp_path / "results")
        for fold in range(2):
            store.record_result(_spec(fold=fold), "none", {"auc": 1.0})
        table = report_table(store, ["dataset"])
        out = tmp_path / "c.svg"
        render_barchart(table, "auc", out)
        # margin is 60px: a mean of 1.0 on a [0,1] axis tops out exactly there
        assert '<rect class="bar" x="120" y="60"' in out.read_text()

    def test_deterministic_bytes(self, tmp_path):
        table = self._table(tmp_path)
        render_barchart(table, "auc", tmp_path / "a.svg")
        render_barchart(table, "auc", tmp_path / "b.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_unknown_metric(self, tmp_path):
        table = self._table(tmp_path)
        with pytest.raises(ConfigError, match="not present"):
            render_barchart(table, "f1", tmp_path / "c.svg")
