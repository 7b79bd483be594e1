import numpy as np
import pytest

from whitenlab import normlayers, stochastic
from whitenlab.errors import InputError
from whitenlab.stochastic import SNDQuery


def bn_query(d=4, B=8, s=10, N=20, seed=0, pop=500, kind="bn", T=5):
    cfg = normlayers.NormConfig(kind, eps=1e-5, iterations=T, group_size=max(d, 1), affine=False)
    return SNDQuery(
        normalizer=cfg,
        dimension=d,
        batch_size=B,
        repeats=s,
        probes=N,
        population_size=pop,
        kappa_batch=min(256, pop),
        seed=seed,
    )


class TestPerSample:
    def test_degenerate_sampler_gives_zero(self):
        q = bn_query(d=3, B=4, s=6)
        rng = np.random.default_rng(0)
        pop = rng.standard_normal((3, 50))
        fixed = rng.standard_normal((3, 3))
        value = stochastic.snd_per_sample(pop[:, 0], pop, q, sampler=lambda i: fixed)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_whole_population_sampler_gives_zero(self):
        # every batch is the entire population: nothing varies across resamples
        rng = np.random.default_rng(1)
        pop = rng.standard_normal((3, 7))
        with pytest.raises(InputError):
            # batch cannot exceed the population
            bn_query(d=3, B=8, s=5, pop=7)
        q = bn_query(d=3, B=7, s=5, pop=7)
        whole = pop[:, 1:]  # x is column 0; partners are the rest
        value = stochastic.snd_per_sample(pop[:, 0], pop, q, sampler=lambda i: whole)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_one_dimensional_exhaustive_enumeration(self):
        # population {-1, +1}, probe x = +1, B = 2: the partner is one of two
        # equally likely values, so enumerate both outcomes directly
        eps = 1e-5
        pop = np.array([[-1.0, 1.0]])
        q = bn_query(d=1, B=2, s=2, pop=2)

        def outcome(partner):
            batch = np.array([[1.0, partner]])
            out, _ = normlayers.bn_forward(batch, eps)
            return out[0, 0]

        a, b = outcome(-1.0), outcome(1.0)  # 1/sqrt(1+eps) and 0.0
        expected = 0.5 * (abs(a - (a + b) / 2) + abs(b - (a + b) / 2))
        value = stochastic.snd_per_sample(
            np.array([1.0]), pop, q, sampler=lambda i: np.array([[-1.0 if i == 0 else 1.0]])
        )
        assert value == pytest.approx(expected, rel=1e-12)

    def test_bn_fast_path_matches_per_resample_forward(self):
        # the sum/sumsq path must agree with running the real standardization
        # on each resampled batch and reading off the probe's column
        rng = np.random.default_rng(7)
        d, b, s = 9, 12, 6
        pop = rng.standard_normal((d, 40))
        x = pop[:, 3]
        q = bn_query(d=d, B=b, s=s, pop=40, seed=13)
        fixed_partners = [rng.standard_normal((d, b - 1)) for _ in range(s)]
        fast = stochastic.snd_per_sample(x, pop, q, sampler=lambda i: fixed_partners[i])
        outs = []
        for i in range(s):
            batch = np.concatenate([x[:, None], fixed_partners[i]], axis=1)
            out, _ = normlayers.bn_forward(batch, q.normalizer.eps)
            outs.append(out[:, 0])
        outs = np.array(outs)
        slow = float(np.linalg.norm(outs - outs.mean(axis=0), axis=1).mean())
        assert fast == pytest.approx(slow, abs=1e-10)

    def test_batched_paths_match_normlayers(self):
        rng = np.random.default_rng(2)
        s, d, b = 5, 6, 12
        batches = rng.standard_normal((s, d, b))
        for kind, group in (("bn", 6), ("dbn", 6), ("iternorm", 6), ("iternorm", 4)):
            cfg = normlayers.NormConfig(kind, eps=1e-4, iterations=5, group_size=group, affine=False)
            fast, bad = stochastic._batched_normalize_col0(batches, cfg)
            assert not bad.any()
            for i in range(s):
                ref, _ = normlayers.grouped_forward(batches[i], cfg)
                assert np.abs(fast[i] - ref[:, 0]).max() <= 1e-10, (kind, group)


class TestOperator:
    def test_identity_transform_has_zero_disturbance(self):
        q = bn_query(d=3, B=4, s=5, N=10, pop=100)
        report = stochastic.snd_operator(q, transform=lambda batches: batches[:, :, 0].copy())
        assert report.snd_mean == pytest.approx(0.0, abs=1e-12)
        assert report.snd_stderr == pytest.approx(0.0, abs=1e-12)
        assert report.failures == 0

    def test_deterministic_reports(self):
        q = bn_query(d=8, B=16, s=8, N=12, pop=400, seed=11)
        r1 = stochastic.snd_operator(q)
        r2 = stochastic.snd_operator(q)
        assert np.array_equal(r1.per_sample, r2.per_sample)
        assert r1.snd_mean == r2.snd_mean
        assert r1.cond_number == r2.cond_number

    def test_dbn_conditioning_near_one(self):
        # exact whitening pins the output covariance at the identity up to eps
        q = bn_query(d=16, B=256, s=2, N=1, pop=2000, kind="dbn")
        report = stochastic.snd_operator(q)
        assert 1.0 <= report.cond_number <= 1.01

    def test_bn_disturbance_decreases_with_batch(self):
        qa = bn_query(d=128, B=16, s=20, N=40, pop=4000, seed=3)
        qb = bn_query(d=128, B=64, s=20, N=40, pop=4000, seed=3)
        ra, rb = stochastic.snd_operator(qa), stochastic.snd_operator(qb)
        assert ra.snd_mean > rb.snd_mean

    def test_whitening_disturbance_ordering_scaled_down(self):
        # approximate whitening disturbs samples far less than the exact
        # eigen path when the batch is small relative to the dimension
        base = dict(d=64, B=128, s=8, N=12, pop=2000, seed=5)
        r_iter = stochastic.snd_operator(bn_query(kind="iternorm", **base))
        r_dbn = stochastic.snd_operator(bn_query(kind="dbn", **base))
        assert r_iter.snd_mean < r_dbn.snd_mean

    def test_query_validation(self):
        with pytest.raises(InputError):
            bn_query(B=1)
        with pytest.raises(InputError):
            bn_query(s=1)
        with pytest.raises(InputError):
            bn_query(B=600, pop=500)


class TestSweep:
    def test_single_point_equals_operator(self):
        base = bn_query(d=6, B=8, s=6, N=10, pop=300, seed=21)
        reports = stochastic.sweep("batch_size", [8], base, repetitions=1)
        assert len(reports) == 1
        derived = stochastic.point_query(base, "batch_size", 8, 0, 0)
        direct = stochastic.snd_operator(derived)
        assert reports[0].snd_mean == direct.snd_mean
        assert reports[0].cond_number == direct.cond_number
        assert reports[0].axis_value == 8.0

    def test_grid_validation(self):
        base = bn_query()
        with pytest.raises(InputError):
            stochastic.sweep("batch_size", [], base)
        with pytest.raises(InputError):
            stochastic.sweep("batch_size", [8, 4], base)
        with pytest.raises(InputError):
            stochastic.sweep("samples", [4, 8], base)

    def test_dimension_sweep_caps_group_size(self):
        base = bn_query(d=4, B=16, s=4, N=4, pop=200, kind="iternorm")
        reports = stochastic.sweep("dimension", [2, 4], base, repetitions=1)
        assert [r.query.effective_config().group_size for r in reports] == [2, 4]

    def test_bn_dimension_growth_at_micro_batch(self):
        base = bn_query(d=2, B=2, s=30, N=60, pop=2000, seed=9)
        reports = stochastic.sweep("dimension", [2, 16, 128], base, repetitions=2)
        means = [r.snd_mean for r in reports]
        assert means[0] < means[1] < means[2]

    def test_deterministic(self):
        base = bn_query(d=6, B=8, s=5, N=8, pop=200, seed=31)
        a = stochastic.sweep("batch_size", [4, 8], base, repetitions=2)
        b = stochastic.sweep("batch_size", [4, 8], base, repetitions=2)
        assert [r.snd_mean for r in a] == [r.snd_mean for r in b]
        assert [r.cond_number for r in a] == [r.cond_number for r in b]

    def test_csv_schema(self, tmp_path):
        base = bn_query(d=4, B=8, s=4, N=6, pop=200)
        reports = stochastic.sweep("batch_size", [4, 8], base, repetitions=1)
        path = tmp_path / "sweep.csv"
        stochastic.write_reports_csv(path, reports, echo={"command": "snd", "seed": 0})
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# {")
        assert lines[1] == ",".join(stochastic.CSV_COLUMNS)
        assert len(lines) == 4
        first = lines[2].split(",")
        assert first[0] == "4.0" and first[1] == "bn"
        assert first[-1] == "ok"
