"""Smoke test for the Python bindings: train tiny runs, compose, evaluate."""

import math

import moddiff


def main():
    env = moddiff.Env("point2d")
    assert (env.state_dim, env.action_dim) == (4, 2)

    ds = moddiff.Dataset.generate(env, "medium", 1000, 0)
    assert len(ds) >= 1000 and ds.is_coherent()

    small = """
total_steps = 20
batch_size = 16
checkpoint_interval = 10
policy_hidden = [16]
guidance_hidden = [16]
diffusion_steps = 4
dataset_size = 1000
"""
    dql = moddiff.train(moddiff.TrainConfig(small + 'regimen = "gfdt"\n'), ds)
    assert dql.steps == [0, 10, 20]
    assert len(dql.losses) == 20

    idql = moddiff.train(moddiff.TrainConfig(small + 'algorithm = "idql"\nregimen = "joint"\n'), ds)

    hybrid = moddiff.compose(idql.guidance(-1), dql.policy(-1), 0.1)
    returns = hybrid.evaluate(env, 5, 3)
    assert len(returns) == 5 and all(math.isfinite(r) for r in returns)

    own = moddiff.compose(dql.guidance(-1), dql.policy(-1), 0.1)
    assert own.evaluate(env, 5, 3) == dql.agent(-1).evaluate(env, 5, 3)

    try:
        moddiff.compose(dql.guidance(-1), moddiff.train(
            moddiff.TrainConfig(small + 'env_name = "linreg1d"\n'),
            moddiff.Dataset.generate(moddiff.Env("linreg1d"), "medium", 1000, 0),
        ).policy(-1))
    except moddiff.ModdiffError as e:
        assert "composition incompatible" in str(e)
    else:
        raise AssertionError("dimension mismatch was accepted")

    u, p, exact = moddiff.mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert (u, p, exact) == (0.0, 0.1, True)
    assert abs(moddiff.reduction_pct(7.81e-6, 5.59e-5) - 86.0) < 0.1
    v = moddiff.variance_stats([1, 2, 3, 4])
    assert (v["median_var"], v["iqr"]) == (2.5, 1.5)
    f, p = moddiff.levene_test([[0, 0, 0, 0], [-10, 10, -10, 10]])
    assert p < 0.01
    print("python smoke test passed")


if __name__ == "__main__":
    main()
