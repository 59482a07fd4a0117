import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeptruck.checkpoint import CheckpointError, load_container, save_container
from deeptruck.episode import Episode, EpisodeFormatError, read_dataset, read_episode, write_dataset, write_episode

GOLDEN_HEADER = "t,E_cmd,B_cmd,theta_rdg,v,a,f_rate"
GOLDEN_HEADER_FLAT = "t,E_cmd,B_cmd,v,a,f_rate"


def make_episode(n=50, grade=True, seed=0):
    rng = np.random.default_rng(seed)
    return Episode(
        dt=0.1,
        t=np.arange(n) * 0.1,
        E_cmd=rng.uniform(0, 100, n),
        B_cmd=rng.uniform(0, 100, n),
        v=rng.uniform(0, 35, n),
        a=rng.normal(0, 1, n),
        f_rate=rng.uniform(0.3, 30, n),
        theta_rdg=rng.uniform(-3, 3, n) if grade else None,
        meta={"seed": seed, "kind": "spanning", "plant_hash": "abc123"},
    )


def test_round_trip_is_bit_exact(tmp_path):
    ep = make_episode()
    write_episode(ep, tmp_path / "e.csv")
    back = read_episode(tmp_path / "e.csv")
    assert back.equals(ep)
    assert back.meta == ep.meta


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=20))
def test_round_trip_arbitrary_doubles(tmp_path_factory, values):
    n = len(values)
    ep = Episode(0.1, np.arange(n) * 0.1, values, values, values, values, values)
    path = tmp_path_factory.mktemp("rt") / "e.csv"
    write_episode(ep, path)
    assert read_episode(path).equals(ep)


def test_golden_headers(tmp_path):
    write_episode(make_episode(), tmp_path / "g.csv")
    write_episode(make_episode(grade=False), tmp_path / "f.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "# dt=0.10000000000000001"
    assert GOLDEN_HEADER in lines
    assert GOLDEN_HEADER_FLAT in (tmp_path / "f.csv").read_text().splitlines()


def test_grade_column_optional(tmp_path):
    write_episode(make_episode(grade=False), tmp_path / "f.csv")
    ep = read_episode(tmp_path / "f.csv")
    assert ep.w_dim == 0 and ep.w.shape == (50, 0)
    assert ep.without_grade().w_dim == 0


def _write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    return p


def test_missing_column_is_named(tmp_path):
    p = _write(tmp_path, "# dt=0.1\nt,E_cmd,B_cmd,a,f_rate\n0,0,0,0,0\n")
    with pytest.raises(EpisodeFormatError, match="'v'|v"):
        read_episode(p)
    try:
        read_episode(p)
    except EpisodeFormatError as exc:
        assert "v" in str(exc) and exc.line is not None


def test_ragged_row_reports_line(tmp_path):
    p = _write(tmp_path, "# dt=0.1\nt,E_cmd,B_cmd,v,a,f_rate\n0,0,0,0,0,0\n0.1,0,0,0,0\n")
    with pytest.raises(EpisodeFormatError) as err:
        read_episode(p)
    assert err.value.line == 4


def test_non_uniform_grid_rejected(tmp_path):
    p = _write(tmp_path, "# dt=0.1\nt,E_cmd,B_cmd,v,a,f_rate\n0,0,0,0,0,0\n0.1,0,0,0,0,0\n0.35,0,0,0,0,0\n")
    with pytest.raises(EpisodeFormatError) as err:
        read_episode(p)
    assert err.value.line == 5


def test_bad_number_rejected(tmp_path):
    p = _write(tmp_path, "# dt=0.1\nt,E_cmd,B_cmd,v,a,f_rate\n0,0,0,zero,0,0\n")
    with pytest.raises(EpisodeFormatError):
        read_episode(p)


def test_dataset_round_trip(tmp_path):
    eps = [make_episode(seed=i, n=20 + i) for i in range(3)]
    paths = write_dataset(eps, tmp_path / "ds")
    assert [p.name for p in paths] == ["episode_00000.csv", "episode_00001.csv", "episode_00002.csv"]
    back = read_dataset(tmp_path / "ds")
    assert all(a.equals(b) for a, b in zip(eps, back))


def test_checkpoint_container_round_trip(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi]), "empty": np.zeros((0, 4))}
    save_container(tmp_path / "c.ckpt", "thing", {"x": 1}, arrays)
    kind, meta, back = load_container(tmp_path / "c.ckpt", expect_kind="thing")
    assert kind == "thing" and meta == {"x": 1}
    for k in arrays:
        assert back[k].shape == arrays[k].shape and np.array_equal(back[k], arrays[k])
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == b"DTRKCKPT" and raw[8:12] == (1).to_bytes(4, "little")


def test_checkpoint_errors(tmp_path):
    save_container(tmp_path / "c.ckpt", "thing", {}, {"a": np.ones(2)})
    with pytest.raises(CheckpointError):
        load_container(tmp_path / "c.ckpt", expect_kind="other")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_container(tmp_path / "junk.ckpt")
