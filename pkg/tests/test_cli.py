import numpy as np
import pytest

from cmfcold.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_SOLVER, ExperimentConfig, main, parse_config,
                         serialize_config, substream_seed)
from cmfcold.evaluation import MostPopularScorer, random_baseline, run_scenarios
from cmfcold.pipeline import load_long_attributes, load_wide_attributes, parse_schema, read_split
from cmfcold.serialization import load_model

from synthetic import planted_dataset

USER_SCHEMA = "user:id,gender:categorical,age:categorical,occupation:categorical,zip:ignore"


def write_fixture(root, n_users=80, n_items=50, seed=0):
    data = planted_dataset(n_users=n_users, n_items=n_items, k=3, p=4, q=6, density=0.4, seed=seed)
    R = data.ratings
    with open(root / "ratings.dat", "w") as fh:
        for u, i, x in zip(R.user_labels(), R.item_labels(), R.ratings):
            fh.write(f"{u}::{i}::{int(x)}::978300760\n")
    rng = np.random.default_rng(seed)
    with open(root / "users.dat", "w") as fh:
        for u in R.user_ids:
            fh.write(f"{u}::{'MF'[rng.integers(2)]}::{rng.choice([1, 18, 25, 35])}::"
                     f"{rng.integers(5)}::{rng.integers(10000, 99999)}\n")
    with open(root / "genome.csv", "w") as fh:
        fh.write("movieId,tagId,relevance\n")
        for r, i in enumerate(R.item_ids):
            if r % 10 == 9:
                continue  # some items without tags
            for t, v in enumerate(data.item_side.values[r]):
                fh.write(f"{i},{t + 1},{float(v)!r}\n")
    (root / "exp.cfg").write_text(
        f"ratings = {root / 'ratings.dat'}\n"
        f"user_attributes = {root / 'users.dat'}\n"
        f"item_attributes = {root / 'genome.csv'}\n"
        f"output_dir = {root / 'run'}\n"
        "k = 4\nlambda = 0.01\nmax_iterations = 60\nmin_test_ratings = 2\n"
        "fraction_warm_test = 0.2\nseed = 3\n")
    return root / "exp.cfg"


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Split once, train the three model kinds, and evaluate."""
    root = tmp_path_factory.mktemp("exp")
    cfg = str(write_fixture(root))
    assert main(["split", "--config", cfg]) == EXIT_OK
    assert main(["train", "--config", cfg, "--model", "mf", "--deterministic"]) == EXIT_OK
    assert main(["train", "--config", cfg, "--model", "cmf", "--set", "w_x=2.14", "--set", "w_u=0.43",
                 "--set", "w_i=0.43", "--deterministic"]) == EXIT_OK
    assert main(["train", "--config", cfg, "--model", "offsets", "--deterministic"]) == EXIT_OK
    assert main(["evaluate", "--config", cfg, "--deterministic"]) == EXIT_OK
    return root, cfg


def test_split_writes_manifests_matching_recount(experiment):
    root, _ = experiment
    split_dir = root / "run" / "split"
    for name in ("train", "test_warm", "test_new_users", "test_new_items", "test_new_both"):
        assert (split_dir / f"{name}.tsv").exists()
    split = read_split(split_dir)
    summary = (split_dir / "summary.tsv").read_text().splitlines()[1:]
    for line, (name, M) in zip(summary, split.sets().items()):
        rows = (split_dir / f"{name}.tsv").read_text().splitlines()[1:]
        users = {r.split("\t")[0] for r in rows}
        items = {r.split("\t")[1] for r in rows}
        assert line.split("\t") == [name, str(len(rows)), str(len(users)), str(len(items))]
    assert (root / "run" / "config.txt").exists()


def test_zero_cold_fractions_give_empty_manifests(tmp_path):
    cfg = str(write_fixture(tmp_path))
    code = main(["split", "--config", cfg, "--set", "fraction_new_users=0", "--set", "fraction_new_items=0"])
    assert code == EXIT_OK
    for name in ("test_new_users", "test_new_items", "test_new_both"):
        assert (tmp_path / "run" / "split" / f"{name}.tsv").read_text().splitlines() == ["user_id\titem_id\trating"]


def test_missing_ratings_file_names_path(tmp_path, capsys):
    code = main(["split", "--ratings", str(tmp_path / "nope.dat"), "--output-dir", str(tmp_path),
                 "--set", "fraction_new_items=0"])
    assert code == EXIT_DATA
    assert "nope.dat" in capsys.readouterr().err


def test_training_logs(experiment):
    root, _ = experiment
    models = root / "run" / "models"

    def trace(name):
        lines = (models / f"{name}.log").read_text().splitlines()
        start = lines.index("iteration\tobjective") + 1
        return lines, [float(line.split("\t")[1]) for line in lines[start:] if not line.startswith("#")]

    lines, mf = trace("mf")
    assert len(mf) > 2 and all(b <= a for a, b in zip(mf, mf[1:])) and mf[-1] < mf[0]
    lines, _ = trace("cmf")
    assert "w_x=2.14 w_u=0.43 w_i=0.43" in lines[0]
    assert lines[-1].startswith("# termination=")


def test_offsets_iteration_cap_defaults_to_800():
    assert ExperimentConfig().max_iterations == 800
    assert ExperimentConfig().solver().max_iterations == 800


def test_model_files_round_trip(experiment):
    root, _ = experiment
    for name in ("mf", "cmf", "offsets"):
        model = load_model(root / "run" / "models" / f"{name}.npz")
        assert model.trace and np.isfinite(model.A).all()
    offsets = load_model(root / "run" / "models" / "offsets.npz")
    # 2 genders + 4 age buckets + 5 occupations; 6 tag columns
    assert offsets.C.shape == (11, 4) and offsets.D.shape == (6, 4)


def test_report_matches_recomputation(experiment):
    root, cfg_path = experiment
    cfg = parse_config(open(cfg_path).read())
    split = read_split(root / "run" / "split")
    U = load_wide_attributes(root / "users.dat", "::", parse_schema(USER_SCHEMA))
    I = load_long_attributes(root / "genome.csv")
    scorers = {"Most-popular": MostPopularScorer(split.train),
               "Random": random_baseline(substream_seed(cfg.seed, "baseline"))}
    for name in ("cmf", "mf", "offsets"):
        scorers[name] = load_model(root / "run" / "models" / f"{name}.npz").scorer(U, I)
    for report in run_scenarios(scorers, split, 5):
        written = (root / "run" / "reports" / f"{report.scenario}.tsv").read_text()
        assert written == report.to_delimited()
    warm = (root / "run" / "reports" / "warm.tsv").read_text()
    assert "Most-popular" in warm and "Random" in warm


def test_baselines_only_evaluate(tmp_path, capsys):
    cfg = str(write_fixture(tmp_path))
    assert main(["split", "--config", cfg]) == EXIT_OK
    assert main(["evaluate", "--config", cfg]) == EXIT_OK
    warm = (tmp_path / "run" / "reports" / "warm.tsv").read_text().splitlines()
    assert [line.split("\t")[1] for line in warm[1:]] == ["Most-popular", "Random"]
    new_items = (tmp_path / "run" / "reports" / "new-items.tsv").read_text().splitlines()
    assert [line.split("\t")[1] for line in new_items[1:]] == ["Random"]


def test_cold_scenarios_without_attributes_name_the_input(experiment, capsys):
    root, cfg = experiment
    code = main(["evaluate", "--config", cfg, "--set", "user_attributes=none",
                 str(root / "run" / "models" / "offsets.npz")])
    assert code == EXIT_CONFIG
    assert "user_attributes" in capsys.readouterr().err


def run_predict(capsys, *argv):
    capsys.readouterr()
    code = main(["predict", *argv])
    out = capsys.readouterr()
    return code, [line.split("\t") for line in out.out.splitlines()], out.err


def test_predict_known_pair_matches_report_scorer(experiment, capsys):
    root, cfg = experiment
    split = read_split(root / "run" / "split")
    user, item = split.test_warm.user_labels()[0], split.test_warm.item_labels()[0]
    for name in ("cmf", "offsets"):
        path = root / "run" / "models" / f"{name}.npz"
        code, rows, _ = run_predict(capsys, str(path), "--config", cfg, "--user", user, "--item", item)
        assert code == EXIT_OK and rows[0][0] == item
        want = load_model(path).scorer()([user], [item])[0]
        assert float(rows[0][1]) == want


def test_predict_attribute_only_user_top_n(experiment, capsys, tmp_path):
    root, cfg = experiment
    vec = tmp_path / "u.txt"
    for name in ("cmf", "offsets"):
        path = root / "run" / "models" / f"{name}.npz"
        width = load_model(path).C.shape[0]
        vec.write_text(" ".join(["1"] + ["0"] * (width - 1)))
        code, rows, err = run_predict(capsys, str(path), "--config", cfg, "--user-attrs", str(vec),
                                      "--top-n", "5", "--timings")
        assert code == EXIT_OK and len(rows) == 5
        scores = [float(r[1]) for r in rows]
        assert scores == sorted(scores, reverse=True)
        expected_path = "no linear solve" if name == "offsets" else "fold-in solve"
        assert expected_path in err


def test_predict_new_user_by_id_uses_attribute_file(experiment, capsys):
    root, cfg = experiment
    split = read_split(root / "run" / "split")
    user = split.test_new_users.user_labels()[0]
    path = root / "run" / "models" / "offsets.npz"
    code, rows, err = run_predict(capsys, str(path), "--config", cfg, "--user", user, "--timings")
    assert code == EXIT_OK and len(rows) == load_model(path).item_ids.size
    again = run_predict(capsys, str(path), "--config", cfg, "--user", user)[1]
    assert rows == again


def test_predict_unknown_user_without_attributes(experiment, capsys):
    root, cfg = experiment
    code, _, err = run_predict(capsys, str(root / "run" / "models" / "mf.npz"), "--config", cfg,
                               "--user", "no-such-user", "--set", "user_attributes=none")
    assert code == EXIT_DATA and "no-such-user" in err


def test_config_round_trip():
    text = "k = 12\nlambda = 0.001\nw_u = 0.43\nclip = 1,5\nratings_sep = \\t\nthreads = 2\nsigmoid = false\n"
    cfg = parse_config(text)
    assert cfg.k == 12 and cfg.lambda_ == 0.001 and cfg.ratings_sep == "\t" and cfg.sigmoid is False
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert parse_config(serialize_config(ExperimentConfig())) == ExperimentConfig()


def test_config_errors_exit_with_config_code(tmp_path, capsys):
    assert main(["train", "--output-dir", str(tmp_path), "--set", "k=-1"]) == EXIT_CONFIG
    assert main(["train", "--output-dir", str(tmp_path), "--set", "no_such_key=1"]) == EXIT_CONFIG
    assert main(["split", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert main(["train", "--output-dir", str(tmp_path)]) == EXIT_DATA  # no split yet


def test_solver_failure_exit_code(tmp_path, capsys):
    # one-hot groups each sum to one, so without regularization the second stage is singular
    cfg = str(write_fixture(tmp_path))
    assert main(["split", "--config", cfg]) == EXIT_OK
    code = main(["train", "--config", cfg, "--model", "offsets-two-stage", "--set", "lambda=0"])
    assert code == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_commands_are_deterministic(tmp_path):
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        cfg = str(write_fixture(root))
        out = root / "run"
        for argv in (["split"], ["train", "--model", "cmf"], ["evaluate"]):
            assert main([*argv, "--config", cfg, "--deterministic", "--output-dir", str(out)]) == EXIT_OK
        outputs.append({name: (out / "reports" / f"{name}.tsv").read_text()
                        for name in ("warm", "new-users", "new-items", "new-both")})
        model = load_model(out / "models" / "cmf.npz")
        outputs[-1]["model"] = b"".join(getattr(model, b).tobytes() for b in "ABCDmn")
    assert outputs[0] == outputs[1]
