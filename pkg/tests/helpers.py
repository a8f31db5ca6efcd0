"""Small scene builders shared by the tests."""

import numpy as np

from scenediff import scene as sc


def straight_lanes(n=2, hw=1.75, length=200.0):
    """Parallel eastbound lanes along y = 0, 3.5, ...; lane 0 is the rightmost."""
    lanes = []
    for i in range(n):
        y = 2 * hw * i
        xs = np.linspace(0.0, length, 11)
        wp = np.stack([xs, np.full_like(xs, y), np.zeros_like(xs)], -1)
        lanes.append(sc.Lane(i, wp, hw, left_id=i + 1 if i + 1 < n else None, right_id=i - 1 if i else None))
    return lanes


def simple_scene(states, lanes=None, t_hist=4, name="simple"):
    states = np.asarray(states, dtype=np.float64)
    hist = np.repeat(states[:, None], t_hist, axis=1)
    return sc.Scene(
        lanes=straight_lanes() if lanes is None else lanes, states=states,
        extents=np.tile([4.0, 2.0], (len(states), 1)), history=hist, name=name,
    )


# criterion number -> one-line verdict, printed in the terminal summary
ACCEPTANCE = {}
