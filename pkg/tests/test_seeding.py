from delaycert.seeding import derive_seed, rng_for


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, "traj", 3) == derive_seed(0, "traj", 3)
    seeds = {derive_seed(r, label, i) for r in (0, 1) for label in ("traj", "dist") for i in range(50)}
    assert len(seeds) == 200
    assert 0 <= derive_seed(7) < 2 ** 64


def test_rng_streams_reproduce():
    assert rng_for(3, "a").random(5).tolist() == rng_for(3, "a").random(5).tolist()
    assert rng_for(3, "a").random() != rng_for(3, "b").random()
