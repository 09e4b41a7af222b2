import io
import json
from pathlib import Path

import pytest

from mvlab import cli
from mvlab.config import ConfigError, load_config, load_defaults, sample_init, sim_section


def write(path: Path, text: str) -> str:
    path.write_text(text)
    return str(path)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def outdir_of(stdout: str) -> Path:
    return Path(stdout.splitlines()[0])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


SMALL = """
[sim]
dt = 0.01
steps = 20
particles = 200
record_every = 5
"""


class TestDescribe:
    def test_text_mentions_closed_form(self, capsys):
        code, out, _ = run_cli(capsys, "describe", "--system", "ex5_2")
        assert code == 0 and "−(3/2)(x−m)⁴" in out

    def test_text_lists_two_point_constants(self, capsys):
        code, out, _ = run_cli(capsys, "describe", "--system", "ex5_3")
        assert code == 0 and "(3, 3, 2, 0.5)" in out

    def test_json_round_trips_through_loader(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "describe", "--system", "ex5_1", "--format", "json")
        assert code == 0
        payload = json.loads(out)
        path = write(tmp_path / "d.json", out)
        assert load_config(path) == payload
        code2, out2, _ = run_cli(capsys, "describe", "--config", path, "--format", "json")
        assert code2 == 0 and out2 == out

    def test_unknown_system(self, capsys):
        code, _, err = run_cli(capsys, "describe", "--system", "nope")
        assert code == 2 and "ex5_1" in err


class TestExitCodes:
    def test_certify_passes(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", '[params]\nsamples = 200\n')
        code, out, _ = run_cli(capsys, "certify", "--system", "ex5_1", "--config", cfg,
                               "--out", str(tmp_path / "runs"))
        assert code == 0
        d = outdir_of(out)
        assert json.loads((d / "violations.json").read_text()) == []
        man = json.loads((d / "manifest.json").read_text())
        assert man["seed"] == 0 and man["version"] and "violations.json" in man["files"]

    def test_violation_exit_one(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", SMALL + '[params]\nrate_range = [100.0, 200.0]\n')
        code, _, _ = run_cli(capsys, "decay", "--system", "ex5_2", "--config", cfg,
                             "--out", str(tmp_path))
        assert code == 1

    def test_unknown_system_exit_two(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "simulate", "--system", "ex7", "--out", str(tmp_path))
        assert code == 2
        assert all(n in err for n in ("ex5_1", "ex5_2", "ex5_3"))

    @pytest.mark.parametrize("text", ["bogus = 1\n", "[sim]\ndt = -1.0\n", "[sim]\nsteps = 1.5\n",
                                      "init = 'missing.csv'\n", "format = 'xml'\n"])
    def test_bad_config_exit_two(self, capsys, tmp_path, text):
        cfg = write(tmp_path / "c.toml", text)
        code, _, _ = run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg,
                             "--out", str(tmp_path))
        assert code == 2

    def test_unparsable_config(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", "[sim\n")
        assert run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg)[0] == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_blow_up_exit_three(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", """
[sim]
dt = 1.0
steps = 40
particles = 10
[init]
kind = "point"
at = 50.0
""")
        code, _, err = run_cli(capsys, "simulate", "--system", "ex5_1", "--config", cfg,
                               "--out", str(tmp_path))
        assert code == 3 and "blow-up" in err

    def test_semigroup_needs_bar_field(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", SMALL)
        assert run_cli(capsys, "semigroup", "--system", "ex5_1", "--config", cfg,
                       "--out", str(tmp_path))[0] == 2


class TestOutputs:
    @pytest.mark.parametrize("experiment,system,params", [
        ("simulate", "ex5_1", ""),
        ("certify", "ex5_3", "[params]\nsamples = 50\n"),
        ("generator-check", "ex5_1", "[params]\npoints = 10\n"),
        ("decay", "ex5_2", ""),
        ("transport", "ex5_3", "[params]\nmetric = 'W_V'\n"),
        ("semigroup", "ex5_3", "[params]\ns = 0.05\nt = 0.05\nouter = 16\ninner = 8\n"),
        ("contraction", "ex5_3", ""),
        ("invariant", "ex5_2", ""),
    ])
    def test_byte_identical_across_workers(self, capsys, tmp_path, experiment, system, params):
        cfg = write(tmp_path / "c.toml", SMALL + params)
        trees = []
        for workers in ("1", "3"):
            out = tmp_path / f"w{workers}"
            code, stdout, _ = run_cli(capsys, experiment, "--system", system, "--config", cfg,
                                      "--workers", workers, "--out", str(out))
            assert code in (0, 1)
            trees.append(tree_bytes(out))
        assert trees[0] == trees[1] and trees[0]

    def test_rerun_same_directory_same_bytes(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", SMALL)
        _, a, _ = run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg,
                          "--out", str(tmp_path / "r"))
        first = tree_bytes(tmp_path / "r")
        _, b, _ = run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg,
                          "--out", str(tmp_path / "r"))
        assert a == b and tree_bytes(tmp_path / "r") == first

    def test_seed_changes_run_id(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", SMALL)
        _, a, _ = run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg, "--out",
                          str(tmp_path))
        _, b, _ = run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg, "--seed", "5",
                          "--out", str(tmp_path))
        assert outdir_of(a) != outdir_of(b)

    def test_manifest_reruns_exactly(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", SMALL)
        _, out, _ = run_cli(capsys, "invariant", "--system", "ex5_2", "--config", cfg, "--out",
                            str(tmp_path / "a"))
        d = outdir_of(out)
        man = json.loads((d / "manifest.json").read_text())
        again = write(tmp_path / "m.json", json.dumps(man["config"]))
        _, out2, _ = run_cli(capsys, "invariant", "--config", again, "--out", str(tmp_path / "b"))
        d2 = outdir_of(out2)
        assert d.name == d2.name
        assert tree_bytes(d) == tree_bytes(d2)

    def test_csv_format(self, capsys, tmp_path):
        cfg = write(tmp_path / "c.toml", SMALL)
        code, out, _ = run_cli(capsys, "decay", "--system", "ex5_2", "--config", cfg,
                               "--format", "csv", "--out", str(tmp_path))
        series = (outdir_of(out) / "series.csv").read_text().splitlines()
        assert series[0] == "t,quantity,value,std_error" and len(series) == 6

    def test_init_from_cloud_file(self, capsys, tmp_path):
        (tmp_path / "cloud.csv").write_text("x1\n0.5\n1.5\n")
        cfg = write(tmp_path / "c.toml", 'init = "cloud.csv"\n[sim]\ndt = 0.01\nsteps = 3\n')
        code, out, _ = run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg,
                               "--out", str(tmp_path / "o"))
        assert code == 0
        body = json.loads((outdir_of(out) / "trajectory.json").read_text())
        assert body["summary"][0][:2] == [0.0, 1.0]


class TestConfig:
    def test_defaults_table(self):
        d = load_defaults()
        assert d["dt"] == 1e-3 and d["particles"] == 10_000 and d["fd_step"] == 1e-5
        assert d["burn_in_fraction"] == 0.1

    def test_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MVLAB_DEFAULTS", write(tmp_path / "d.toml", "particles = 7\n"))
        assert load_defaults()["particles"] == 7
        monkeypatch.setenv("MVLAB_DEFAULTS", write(tmp_path / "e.toml", "nonsense = 7\n"))
        with pytest.raises(ConfigError):
            load_defaults()

    def test_env_override_reaches_cli(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("MVLAB_DEFAULTS", write(tmp_path / "d.json", '{"particles": 9}'))
        cfg = write(tmp_path / "c.toml", "[sim]\ndt = 0.01\nsteps = 2\n")
        _, out, _ = run_cli(capsys, "simulate", "--system", "ex5_2", "--config", cfg, "--out",
                            str(tmp_path))
        man = json.loads((outdir_of(out) / "manifest.json").read_text())
        assert man["config"]["sim"]["particles"] == 9

    def test_horizon_key(self):
        sim = sim_section({"sim": {"T": 1.5, "dt": 1e-3}}, load_defaults())
        assert sim["steps"] == 1500

    def test_sample_init_kinds(self):
        a = sample_init({"kind": "normal", "mean": 1.0, "std": 0.0}, 5, 0)
        assert a.points.tolist() == [[1.0]] * 5
        b = sample_init({"kind": "uniform", "low": 2.0, "high": 3.0}, 100, 1)
        assert b.points.min() >= 2.0 and b.points.max() < 3.0
        c = sample_init({"kind": "normal"}, 50, 4)
        assert c == sample_init({"kind": "normal"}, 50, 4)
        with pytest.raises(ConfigError):
            sample_init({"kind": "cauchy"}, 5, 0)


def test_run_accepts_stdout_stream(tmp_path):
    args = cli.build_parser().parse_args(["describe", "--system", "ex5_1"])
    buf = io.StringIO()
    assert cli.run(args, stdout=buf) == 0 and buf.getvalue().startswith("ex5_1")
