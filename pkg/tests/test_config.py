import textwrap
from pathlib import Path

import numpy as np
import pytest

from swgsim.config import RuleFactory, load_config, parse_config
from swgsim.denoisers import ErrorProneDenoiser, OptimalDenoiser
from swgsim.errors import ConfigError
from swgsim.guidance import OptimalWeight, guided_predict

CONFIGS = sorted((Path(__file__).parents[1] / "configs").glob("*.yaml"))

BASE = """\
dataset:
  kind: triangle
schedule:
  n_steps: 20
denoisers:
  delta_pos: 0.1
guidance:
  method: wmg
  w: [0, 5]
"""


def parse(text):
    return parse_config(textwrap.dedent(text), "cfg.yaml")


def error_of(text):
    with pytest.raises(ConfigError) as exc:
        parse(text)
    return str(exc.value)


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    RuleFactory(cfg)
    assert cfg.guidance


def test_defaults():
    cfg = parse(BASE)
    assert cfg.schedule.kind == "power-rho" and cfg.schedule.sigma_min == 0.002
    assert cfg.guidance[0].weights == (0.0, 5.0)
    assert cfg.ensemble.n == 100 and cfg.ensemble.seed == 0
    assert cfg.output.dir == "out" and cfg.metrics.endpoint_mode == "nearest-point"


def test_unknown_key_reports_its_line():
    msg = error_of(BASE.replace("  n_steps: 20\n", "  n_steps: 20\n  stepz: 3\n"))
    assert msg.startswith("cfg.yaml:5:") and "stepz" in msg


def test_unknown_top_level_key():
    assert "cfg.yaml:10:" in error_of(BASE + "extra: 1\n")


@pytest.mark.parametrize("old, new, needle", [
    ("n_steps: 20", "n_steps: twenty", "expected an integer"),
    ("n_steps: 20", "n_steps: 0", "at least 1"),
    ("kind: triangle", "kind: square", "expected one of"),
    ("w: [0, 5]", "w: []", "must not be empty"),
    ("w: [0, 5]", "w: [0, .inf]", "finite"),
    ("delta_pos: 0.1", "delta_pos: -0.1", "non-negative"),
    ("method: wmg", "method: magic", "expected one of"),
])
def test_bad_values(old, new, needle):
    msg = error_of(BASE.replace(old, new))
    assert needle in msg and msg.startswith("cfg.yaml:")


def test_missing_guidance():
    assert "guidance" in error_of(BASE.split("guidance:")[0])


def test_malformed_yaml_has_line():
    assert error_of(BASE + "ensemble: [1,\n").startswith("cfg.yaml:")


def test_duplicate_key():
    assert "duplicate" in error_of(BASE + "schedule: {}\n")


def test_missing_dataset_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(BASE.replace("kind: triangle", "kind: file\n  path: nowhere.json"))
    with pytest.raises(ConfigError, match="not found"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")


def test_dataset_file(tmp_path):
    from swgsim.data import corner_pair

    (tmp_path / "ds.json").write_text(corner_pair().to_json())
    p = tmp_path / "c.yaml"
    p.write_text(BASE.replace("kind: triangle", "kind: file\n  path: ds.json"))
    assert RuleFactory(load_config(p)).dataset.shape.H == 8


def test_inline_dataset():
    cfg = parse(BASE.replace("kind: triangle", "kind: inline\n  points: [[0, 1], [1, 0]]\n  labels: [0, 1]"))
    assert RuleFactory(cfg).dataset.n == 2
    assert "dataset" in error_of(BASE.replace("kind: triangle", "kind: inline\n  points: [[0, 1], [1]]"))


def test_plan_errors_name_the_plan():
    text = BASE.replace("kind: triangle", "kind: corner-pair\n  H: 64\n  patch: 8").replace(
        "delta_pos: 0.1", "delta_pos: 0.1\n  swg: {k: 41, N: 9}").replace("method: wmg", "method: m-swg")
    msg = error_of(text)
    assert "H=64" in msg and "k=41" in msg and "N=9" in msg


def test_swg_needs_grid():
    assert "grid" in error_of(BASE.replace("method: wmg", "method: swg"))


def test_interval_counting():
    text = BASE.replace("w: [0, 5]", "w: [1]\n  interval: [10, 15]")
    assert parse(text).guidance[0].interval == (10, 15)
    low = parse(text + "  interval_from: low-noise\n")
    assert low.guidance[0].interval == (4, 9)
    assert "interval" in error_of(BASE.replace("w: [0, 5]", "w: [1]\n  interval: [10, 20]"))


def test_alphas_must_be_convex():
    text = BASE.replace("kind: triangle", "kind: corner-pair").replace(
        "delta_pos: 0.1", "delta_pos: 0.1\n  swg: {k: 5, N: 4}").replace(
        "method: wmg", "method: combined\n  components: [wmg, swg]\n  alphas: [0.5, 0.6]")
    assert "sum to 1" in error_of(text)
    ok = parse(text.replace("0.6", "0.5"))
    rule = RuleFactory(ok).rule(ok.guidance[0], 2.0)
    assert [t.alpha for t in rule.terms] == [0.5, 0.5]


def test_cfg_requires_labels_and_classes():
    cloud = BASE.replace("kind: triangle", "kind: cloud\n  n: 5").replace("method: wmg", "method: cfg")
    assert "labelled" in error_of(cloud)
    assert "class_policy" in error_of(BASE.replace("method: wmg", "method: cfg") + "ensemble:\n  class_policy: none\n")
    assert "conditional" in error_of(BASE.replace("method: wmg", "method: cfg\n  conditional: false"))


def test_factory_rules():
    cfg = parse(BASE)
    f = RuleFactory(cfg)
    rule = f.rule(cfg.guidance[0], 5.0)
    assert isinstance(rule.positive, ErrorProneDenoiser) and rule.positive.delta == 0.1
    assert rule.terms[0].negative.delta == pytest.approx(0.2)
    assert f.rule(cfg.guidance[0], 0.0).positive is rule.positive
    cfgc = parse(BASE.replace("method: wmg", "method: cfg"))
    fc = RuleFactory(cfgc)
    rc = fc.rule(cfgc.guidance[0], 1.0)
    assert rc.positive.conditional and not rc.terms[0].negative.conditional
    assert rc.terms[0].negative.delta == 0.1
    assert fc.class_policy(cfgc.guidance[0]) == "round-robin"
    opt = parse(BASE.replace("method: wmg\n  w: [0, 5]", "method: optimal"))
    ro = RuleFactory(opt).rule(opt.guidance[0], 0.0)
    assert isinstance(ro.terms[0].weight, OptimalWeight)
    assert isinstance(ro.terms[0].weight.oracle, OptimalDenoiser)


def test_explicit_mask():
    cfg = parse(BASE.replace("w: [0, 5]", "w: [3]\n  mask: [1, 0]"))
    rule = RuleFactory(cfg).rule(cfg.guidance[0], 3.0)
    x = np.array([0.4, -0.3])
    out = guided_predict(x, 0.5, 0, rule)
    assert out[1] == rule.positive.predict_noise(x, 0.5)[1]
    assert "length" in error_of(BASE.replace("w: [0, 5]", "w: [3]\n  mask: [1, 0, 1]"))
    assert "0/1" in error_of(BASE.replace("w: [0, 5]", "w: [3]\n  mask: [1, 2]"))


def test_overrides():
    cfg = parse(BASE).with_overrides(out="/tmp/x", seed=12, threads=3)
    assert cfg.output.dir == "/tmp/x" and cfg.ensemble.seed == 12 and cfg.ensemble.threads == 3
