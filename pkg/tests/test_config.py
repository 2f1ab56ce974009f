import pytest

from evalblocks import config as cfgmod
from evalblocks.config import ExperimentSpec, expand_matrix, parse_config, select_targets
from evalblocks.dataset import DatasetManifest
from evalblocks.errors import ConfigError

MINIMAL = """
[[dataset]]
name = "ds1"
manifest = "ds1/manifest.json"

[[embedder]]
id = "synthA"
kind = "synthetic2d"
dim = 16

[[evaluation]]
id = "knn"
kind = "knn"
k = [10, 20, 100, 200]
"""


def _fake_manifest(name, n_folds=5):
    return DatasetManifest(
        name=name, n_folds=n_folds, modalities=["CT"], patch_shape=(2, 2, 2), patches=[]
    )


class TestParse:
    def test_minimal_with_defaults(self):
        cfg = parse_config(MINIMAL)
        assert [a.id for a in cfg.aggregations] == ["none"]
        assert cfg.execution.workers == 1
        assert cfg.execution.backend == "local"
        assert cfg.embedders[0].params["dim"] == 16
        assert cfg.embedders[0].preprocess.mode == "central_slice"

    def test_knn_k_preserved_verbatim(self):
        cfg = parse_config(MINIMAL)
        assert cfg.evaluations[0].params["k"] == [10, 20, 100, 200]
        assert cfg.evaluations[0].params["report_k"] == 20

    def test_duplicate_embedder_id(self):
        text = MINIMAL + '\n[[embedder]]\nid = "synthA"\nkind = "synthetic3d"\n'
        with pytest.raises(ConfigError, match="duplicate embedder id"):
            parse_config(text)

    def test_unknown_kind(self):
        text = MINIMAL.replace('kind = "synthetic2d"', 'kind = "resnet"')
        with pytest.raises(ConfigError, match="unknown kind"):
            parse_config(text)

    def test_syntax_error_reports_location(self):
        with pytest.raises(ConfigError, match="line"):
            parse_config("[[dataset]\nname=")

    def test_missing_required_field(self):
        with pytest.raises(ConfigError, match="manifest"):
            parse_config('[[dataset]]\nname = "x"\n' + MINIMAL.split("[[embedder]]", 1)[1].join(["[[embedder]]", ""]))

    def test_external_requires_placeholders(self):
        text = MINIMAL + '\n[[embedder]]\nid = "ext"\nkind = "external"\ncommand = ["mymodel", "{input}"]\n'
        with pytest.raises(ConfigError, match="output"):
            parse_config(text)

    def test_invalid_k(self):
        text = MINIMAL.replace("k = [10, 20, 100, 200]", "k = [0]")
        with pytest.raises(ConfigError, match="k must be"):
            parse_config(text)

    def test_paths_resolve_against_base_dir(self, tmp_path):
        cfg = parse_config(MINIMAL, base_dir=tmp_path)
        assert cfg.datasets[0].manifest == tmp_path / "ds1/manifest.json"
        assert cfg.execution.cache_dir == tmp_path / "cache"


TWO_BY_TWO = """
[[dataset]]
name = "dsA"
manifest = "a.json"

[[dataset]]
name = "dsB"
manifest = "b.json"

[[embedder]]
id = "synthA"
kind = "synthetic2d"

[[embedder]]
id = "synthB"
kind = "synthetic3d"

[[evaluation]]
id = "knn"
kind = "knn"

[[evaluation]]
id = "probe"
kind = "linear_probe"
"""


class TestExpand:
    def test_forty_specs(self):
        cfg = parse_config(TWO_BY_TWO)
        manifests = {"dsA": _fake_manifest("dsA"), "dsB": _fake_manifest("dsB")}
        specs = expand_matrix(cfg, manifests)
        assert len(specs) == 40  # 2 datasets x 2 embedders x 1 agg x 2 evals x 5 folds

    def test_folds_innermost_in_order(self):
        cfg = parse_config(MINIMAL)
        specs = expand_matrix(cfg, {"ds1": _fake_manifest("ds1")})
        assert [s.fold for s in specs] == [0, 1, 2, 3, 4]

    def test_empty_evaluations(self):
        text = TWO_BY_TWO.split("[[evaluation]]")[0]
        cfg = parse_config(text)
        assert expand_matrix(cfg, {"dsA": _fake_manifest("dsA"), "dsB": _fake_manifest("dsB")}) == []

    def test_missing_manifest(self):
        cfg = parse_config(TWO_BY_TWO)
        with pytest.raises(ConfigError, match="dsB"):
            expand_matrix(cfg, {"dsA": _fake_manifest("dsA")})


class TestSelect:
    @pytest.fixture
    def specs(self):
        cfg = parse_config(TWO_BY_TWO)
        return expand_matrix(cfg, {"dsA": _fake_manifest("dsA"), "dsB": _fake_manifest("dsB")})

    def test_halves_one_axis(self, specs):
        assert len(select_targets(specs, "embedder=synthA")) == 20

    def test_fold_selector(self, specs):
        assert len(select_targets(specs, "fold=0")) == 8

    def test_wildcard_is_identity(self, specs):
        assert select_targets(specs, "dataset=*") == specs

    def test_conjunction(self, specs):
        got = select_targets(specs, "dataset=dsA,evaluation=probe,fold=3")
        assert len(got) == 2
        assert all(s.dataset == "dsA" and s.evaluation == "probe" and s.fold == 3 for s in got)

    def test_composition_equals_combined(self, specs):
        one_shot = select_targets(specs, "embedder=synthB,fold=1")
        two_step = select_targets(select_targets(specs, "embedder=synthB"), "fold=1")
        assert one_shot == two_step

    def test_unknown_key(self, specs):
        with pytest.raises(ConfigError, match="unknown selector key"):
            select_targets(specs, "model=synthA")

    def test_unparseable(self, specs):
        with pytest.raises(ConfigError):
            select_targets(specs, "embedder")

    def test_selecting_nothing(self, specs):
        assert select_targets(specs, "dataset=unknown") == []

    def test_spec_is_hashable_value_object(self):
        s = ExperimentSpec("d", "e", "a", "v", 0)
        assert s == ExperimentSpec("d", "e", "a", "v", 0)
        assert len({s, ExperimentSpec("d", "e", "a", "v", 0)}) == 1
