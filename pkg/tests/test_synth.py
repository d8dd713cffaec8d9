import itertools

import pytest

import oracles
from seqfm import synth
from seqfm.gradcheck import FLAG_COMBOS, check_config, config_for_seed


def by_user(rows):
    out = {}
    for u, o, t, v in rows:
        out.setdefault(u, []).append((t, o, v))
    return {u: sorted(evts) for u, evts in out.items()}


class TestMarkovLastItem:
    def test_label_is_previous_class(self):
        rows = synth.markov_last_item(users=1000, objects=20, events=12, seed=1)
        for evts in by_user(rows).values():
            for (_, prev, _), (_, _, label) in zip(evts, evts[1:]):
                assert label == int(prev < 10)

    def test_classes_balanced_and_independent(self):
        rows = synth.markov_last_item(users=1000, objects=20, events=12, seed=2)
        frac = sum(o < 10 for _, o, _, _ in rows) / len(rows)
        assert 0.48 < frac < 0.52

    def test_periodic_law(self):
        rows = synth.markov_last_item(users=50, objects=20, events=20, period=4, seed=0)
        for evts in by_user(rows).values():
            classes = [o < 10 for _, o, _ in evts]
            assert classes[:-4] == classes[4:]

    def test_same_seed(self):
        assert synth.markov_last_item(users=20, seed=4) == synth.markov_last_item(users=20, seed=4)
        assert synth.markov_last_item(users=20, seed=4) != synth.markov_last_item(users=20, seed=5)


class TestBagRandom:
    def test_order_free_label(self):
        rows = synth.bag_random(users=300, objects=20, events=12, window=10, seed=0)
        for evts in by_user(rows).values():
            objs = [o for _, o, _ in evts]
            for t in range(1, len(evts)):
                hist = objs[max(0, t - 10):t]
                shuffled = hist[::-1]
                assert evts[t][2] == int(2 * sum(o < 10 for o in shuffled) > len(shuffled))


def test_rating_range():
    rows = synth.rating_bilinear(users=50, objects=30, events=10, seed=0)
    assert all(1.0 <= v <= 5.0 for *_, v in rows)
    assert len({v for *_, v in rows}) > 3


def test_unknown_generator():
    with pytest.raises(ValueError, match="unknown generator"):
        synth.generate("nope")


def test_write_format(tmp_path):
    synth.write_events([(0, 1, 2, 1), (3, 4, 5, 2.5)], tmp_path / "e.tsv")
    lines = (tmp_path / "e.tsv").read_text().splitlines()
    assert lines[1:] == ["u0\to1\t2\t1", "u3\to4\t5\t2.5"]


def test_bag_bayes_bound():
    # an order-blind scorer cannot exceed this AUC on the window-10 last-item law
    assert oracles.bag_bayes_auc(10) == pytest.approx(0.676197, abs=1e-6)
    assert oracles.bag_bayes_auc(10) <= 0.70


class TestGradcheckHarness:
    def test_flag_combos_complete(self):
        assert len(FLAG_COMBOS) == 28
        assert set(FLAG_COMBOS) == {f for f in itertools.product((True, False), repeat=5) if any(f[:3])}

    def test_configs_cover_grid(self):
        cfgs = [config_for_seed(s) for s in range(28)]
        assert {c.d for c in cfgs} == {2, 4, 8} and {c.l for c in cfgs} == {1, 2}
        assert {c.literal_padding for c in cfgs} == {True, False}

    def test_every_flag_combination(self):
        worst = max(check_config(s).max_rel_err for s in range(len(FLAG_COMBOS)))
        assert worst < 1e-4

    def test_reference_backward_config(self):
        # seven static and nine dynamic features, three static ids, four dynamic slots, d=4, l=2
        from seqfm.model import HyperConfig

        res = check_config(99, HyperConfig(d=4, l=2, n_dyn_max=4, keep_prob=1.0))
        assert res.max_rel_err < 1e-4
