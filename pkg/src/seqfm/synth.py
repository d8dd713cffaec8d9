"""Synthetic event generators with known generative laws."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .numerics import Rng

GENERATORS = ("markov-last-item", "bag-random", "rating-bilinear")


def markov_last_item(users=2000, objects=20, events=30, period=0, seed=0):
    """Label of each event is 1 iff the previous event's object is in class A.

    Objects ``0 .. objects/2 - 1`` form class A. Each user draws a random
    class pattern of length ``period`` (fair coin per slot) and repeats it, so
    the class sequence is an order-``period`` Markov chain; within a class the
    object is uniform. ``period=0`` draws every class independently.

    With ``period = window - 1`` the oldest item of a full window shares the
    final item's class, while the class count of the window is a binomial
    plus the label, exactly as for independent draws.
    The first event has no history, so its label is a fair coin.
    """
    rng = Rng(seed).stream("markov-last-item")
    half = objects // 2
    rows = []
    for u in range(users):
        if period:
            pattern = rng.random(period) < 0.5
            in_a = np.resize(pattern, events)
        else:
            in_a = rng.random(events) < 0.5
        within = rng.integers(0, half, size=events)
        objs = np.where(in_a, within, half + within)
        for t in range(events):
            label = int(rng.random() < 0.5) if t == 0 else int(objs[t - 1] < half)
            rows.append((u, int(objs[t]), t, label))
    return rows


def bag_random(users=2000, objects=20, events=12, window=10, seed=0):
    """Label is 1 iff class-A objects are a strict majority of the last ``window``
    history items, so it depends on the history only as a set."""
    rng = Rng(seed).stream("bag-random")
    half = objects // 2
    rows = []
    for u in range(users):
        objs = rng.integers(0, objects, size=events)
        for t in range(events):
            hist = objs[max(0, t - window):t]
            label = int(2 * int((hist < half).sum()) > len(hist)) if t else int(rng.random() < 0.5)
            rows.append((u, int(objs[t]), t, label))
    return rows


def rating_bilinear(users=500, objects=50, events=20, rank=3, noise=0.25, seed=0):
    """Ratings ``clip(3 + <a_u, b_o> + noise, 1, 5)`` from random low-rank factors."""
    rng = Rng(seed).stream("rating-bilinear")
    a = rng.normal(0.8, (users, rank))
    b = rng.normal(0.8, (objects, rank))
    rows = []
    for u in range(users):
        objs = rng.choice(objects, size=min(events, objects), replace=False)
        for t, o in enumerate(objs):
            r = 3.0 + a[u] @ b[o] + rng.normal(noise)
            rows.append((u, int(o), t, float(np.clip(np.round(r * 2) / 2, 1.0, 5.0))))
    return rows


def generate(name: str, seed: int = 0, **kw):
    fn = {
        "markov-last-item": markov_last_item,
        "bag-random": bag_random,
        "rating-bilinear": rating_bilinear,
    }.get(name)
    if fn is None:
        raise ValueError(f"unknown generator {name!r}; choose from {', '.join(GENERATORS)}")
    return fn(seed=seed, **kw)


def write_events(rows, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("# user_id\tobject_id\ttimestamp\tvalue\n")
        for u, o, t, v in rows:
            val = f"{v:g}" if isinstance(v, float) else str(v)
            fh.write(f"u{u}\to{o}\t{t}\t{val}\n")
