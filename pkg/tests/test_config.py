import json

import pytest

from emloc.assembler import AssemblyConfig
from emloc.bench.runner import BenchConfig
from emloc.config import apply_overrides, build_dataclass, load_config, to_plain, write_resolved
from emloc.errors import ConfigError
from emloc.geometry import Pose6D
from emloc.localizer import LocalizerConfig


class TestLoad:
    def test_yaml_and_json(self, tmp_path):
        (tmp_path / "a.yaml").write_text("bench:\n  runs: 3\n")
        (tmp_path / "a.json").write_text('{"bench": {"runs": 3}}')
        assert load_config(tmp_path / "a.yaml") == load_config(tmp_path / "a.json") == {"bench": {"runs": 3}}

    def test_empty(self, tmp_path):
        (tmp_path / "e.yaml").write_text("")
        assert load_config(tmp_path / "e.yaml") == {}

    @pytest.mark.parametrize("text", ["[1, 2]", "a: [1,"])
    def test_bad(self, tmp_path, text):
        (tmp_path / "b.yaml").write_text(text)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "b.yaml")

    def test_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.yaml")


class TestOverrides:
    def test_nested(self):
        d = apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c=[1, 2]", "x=text"])
        assert d == {"a": {"b": 2, "c": [1, 2]}, "x": "text"}

    def test_input_untouched(self):
        d = {"a": {"b": 1}}
        apply_overrides(d, ["a.b=5"])
        assert d == {"a": {"b": 1}}

    @pytest.mark.parametrize("bad", ["novalue", "=3"])
    def test_malformed(self, bad):
        with pytest.raises(ConfigError):
            apply_overrides({}, [bad])

    def test_through_scalar(self):
        with pytest.raises(ConfigError):
            apply_overrides({"a": 1}, ["a.b=2"])


class TestBuild:
    def test_localizer(self):
        cfg = build_dataclass(LocalizerConfig, {"k": 5, "channels": {"wifi": False}, "ransac": {"iterations": 50}})
        assert cfg.k == 5 and not cfg.channels.wifi and cfg.ransac.iterations == 50
        assert isinstance(cfg.prior_sigma, tuple)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="kk"):
            build_dataclass(LocalizerConfig, {"kk": 5})

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            build_dataclass(LocalizerConfig, {"k": 0})

    def test_pose_forms(self):
        p = Pose6D.from_euler([1, 2, 0], 0.3)
        a = build_dataclass(AssemblyConfig, {"anchor_pose": p.to_dict()})
        b = build_dataclass(AssemblyConfig, {"anchor_pose": {"t": [1, 2, 0], "yaw": 0.3}})
        assert a.anchor_pose.almost_equal(p) and b.anchor_pose.almost_equal(p)

    def test_bench_policies(self):
        cfg = build_dataclass(BenchConfig, {"policies": [{"variant": "A2", "k": 5}]})
        assert cfg.policies[0].variant == "A2" and cfg.policies[0].k == 5

    def test_resolved_round_trip(self, tmp_path):
        cfg = LocalizerConfig(k=3)
        write_resolved({"localizer": to_plain(cfg)}, tmp_path / "c.json")
        back = build_dataclass(LocalizerConfig, json.loads((tmp_path / "c.json").read_text())["localizer"])
        assert to_plain(back) == to_plain(cfg)
