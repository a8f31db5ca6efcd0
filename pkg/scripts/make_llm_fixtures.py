"""Regenerate the offline LLM fixture store from the .gl fixture programs."""

from scenediff import llm

SUCCESS = [
    ("Generate a loss class such that vehicle 1 should collide with vehicle 2.", "collision.gl", "collision"),
    ("Generate a loss class such that vehicle 1 should always keep within 10-30m from vehicle 2.", "keep_distance.gl", "keep_distance"),
    ("Generate a loss class such that vehicle 1 should move along the same direction as vehicle 2.", "same_direction.gl", "same_direction"),
    ("Generate a loss class such that vehicle 1 should collide with vehicle 2 from behind.", "collide_from_behind.gl", "collide_from_behind"),
    ("Generate a loss class such that vehicle 1, vehicle 2, and vehicle 3 all follow their current lanes.", "lane_following.gl", "lane_following"),
]
NEGATIVE = [
    (
        "vehicle 1 and 2 move to the rightmost lane one by one and then both turn right at the next intersection.",
        "negative/right_turn.gl",
        "semantically wrong: ignores 'turn right at the next intersection' and 'one by one'",
    ),
    (
        "Generate a loss class such that vehicle 1 should cut in ahead of vehicle 2 if it is behind vehicle 2 and on its left lane.",
        "negative/cut_in.gl",
        "semantically wrong: never asks for the lateral move into vehicle 2's lane that a cut-in needs",
    ),
]


def main():
    for q, fname, native in SUCCESS:
        text = (llm.FIXTURE_DIR / fname).read_text()
        print(llm.write_fixture(llm.make_fixture(q, text, native=native)))
    for q, fname, note in NEGATIVE:
        text = (llm.FIXTURE_DIR / fname).read_text()
        print(llm.write_fixture(llm.make_fixture(q, text, annotation=note, expect="negative")))


if __name__ == "__main__":
    main()
