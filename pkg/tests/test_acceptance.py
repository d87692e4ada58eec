"""Acceptance suite: one test per release criterion, strict tolerances.

Each test prints a PASS/FAIL line so a bare `pytest tests/test_acceptance.py -s`
doubles as the acceptance report. The planted-geometry experiments run at
fixed seeds and are fully deterministic.
"""

import math
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from helpers import check_objective_gradient
from planted_experiments import (
    LABEL,
    PATCH,
    make_ordering_oracle,
    ordering_instance,
    two_region_instance,
)
from patchdist import rng
from patchdist.attacks import (
    NesConfig,
    dop_dta,
    dop_loa,
    dop_rd,
    dop_transfer,
    nes_gradients,
    summarize_reports,
)
from patchdist.cli import main as cli_main
from patchdist.compose import PatchSpec, compose, warp_patch
from patchdist.gp import GpState, sobol_points, ucb_next
from patchdist.mixture import (
    Component,
    MixtureParams,
    entropy_loss,
    one_hot,
    uniform_mixture,
)
from patchdist.oracle import ClassifierOracle, RemoteOracle
from patchdist.prior import MappingNetwork
from patchdist.toydata import checker_patch, make_signature_dataset
from patchdist.victims import Mlp, ToyClassifier, ToyEmbedder, train_toy_victim

from test_compose import fd_compose_jacobian, kink_guard
from test_mixture import _entropy_oracle, random_mixture


@contextmanager
def criterion(name: str):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL ({time.monotonic() - start:.1f}s)")
        raise
    print(f"ACCEPTANCE {name}: PASS ({time.monotonic() - start:.1f}s)")


# ---------------------------------------------------------------------------
# 1. gradient correctness of the training objective
# ---------------------------------------------------------------------------


def test_c1_gradient_correctness():
    with criterion("C1 objective-gradient-correctness"):
        start = time.monotonic()
        gen = rng.stream(101, "accept.grad")
        worst = 0.0
        for instance in range(20):
            dims = (12, 12, 3) if instance % 2 else (16, 16, 3)
            n_in = int(np.prod(dims))
            if instance % 3 == 0:
                net_v = Mlp([n_in, 14, 6, 4], seed=300 + instance, label="accept.victim")
                victim = ToyClassifier(net=net_v, input_dims=dims, num_classes=4)
                label = int(gen.integers(4))
            else:
                net_v = Mlp([n_in, 14, 8], seed=300 + instance, label="accept.victim")
                victim = ToyEmbedder(net=net_v, input_dims=dims, embed_dim=8)
                label = None
            image = gen.uniform(0.05, 0.95, size=dims)
            patch = checker_patch(4 if instance % 2 else 5)
            k = 1 + instance % 3
            net = MappingNetwork(k=k, hidden=(12, 8), seed=instance)
            draws = [
                (one_hot(k, int(gen.integers(k))), gen.standard_normal(3)) for _ in range(2)
            ]
            coords = gen.choice(net.params_flat().size, size=50, replace=False)
            worst = max(
                worst,
                check_objective_gradient(
                    net, image, label, victim, patch, draws,
                    lam=(0.0, 0.1, 0.05)[instance % 3],
                    rotation=bool(instance % 2),
                    coords=coords,
                ),
            )
        elapsed = time.monotonic() - start
        assert worst < 1e-4, f"worst relative error {worst:.3g}"
        assert elapsed < 120.0, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 2. compositing fidelity
# ---------------------------------------------------------------------------


def test_c2_compositing_fidelity():
    with criterion("C2 compositing-fidelity"):
        gen = rng.stream(102, "accept.compose")

        # bilinear equals the brute-force double loop
        from test_compose import brute_force_bilinear
        from patchdist.compose import bilinear_sample

        for _ in range(30):
            src = gen.uniform(size=(8, 8))
            xs = gen.uniform(-2.0, 9.0, size=(4, 4))
            ys = gen.uniform(-2.0, 9.0, size=(4, 4))
            np.testing.assert_allclose(
                bilinear_sample(src, xs, ys), brute_force_bilinear(src, xs, ys), atol=1e-12
            )

        # Jacobian vs central differences on 1000 random draws, with
        # untouched-pixel bit-identity checked on the same draws
        from patchdist.compose import compose_jacobian

        worst = 0.0
        for draw in range(1000):
            image = gen.uniform(size=(18, 18, 3))
            patch = checker_patch(5) if draw % 2 else checker_patch(4)
            theta = gen.uniform(-0.6, 0.6, size=3)
            jac = compose_jacobian(image, patch, theta)
            fd = fd_compose_jacobian(image, patch, theta)
            keep = kink_guard(theta, image.shape[:2])
            diff = np.linalg.norm((jac - fd)[keep])
            ref = max(np.linalg.norm(jac[keep]), 1e-12)
            worst = max(worst, diff / ref)

            out = compose(image, patch, theta)
            _, msk = warp_patch(patch, theta, image.shape[:2])
            untouched = msk == 0.0
            assert np.array_equal(out[untouched], image[untouched])
        assert worst < 1e-4, f"worst Jacobian relative error {worst:.3g}"


# ---------------------------------------------------------------------------
# 3. entropy closed form
# ---------------------------------------------------------------------------


def test_c3_entropy_closed_form():
    with criterion("C3 entropy-closed-form"):
        psi = uniform_mixture(np.zeros((1, 3)), np.ones((1, 3)), tau=3000.0)
        worked = entropy_loss(psi, one_hot(1, 0), np.zeros(3))
        assert worked == pytest.approx(-24.2622874, abs=1e-6)

        gen = rng.stream(103, "accept.entropy")
        for _ in range(1000):
            mix = random_mixture(gen)
            k = int(gen.integers(mix.k))
            gamma, r = one_hot(mix.k, k), gen.standard_normal(3)
            got = entropy_loss(mix, gamma, r)
            want = _entropy_oracle(mix, gamma, r)
            assert got == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# 4. NES estimator
# ---------------------------------------------------------------------------


def test_c4_nes_estimator():
    with criterion("C4 nes-estimator"):
        start = time.monotonic()
        gen = rng.stream(104, "accept.nes")

        # linear-loss construction: d mu -> sigma^2
        sigma = np.array([0.8, 1.4, 2.2])
        mu = np.array([0.3, -0.7, 1.5])
        psi = uniform_mixture(mu[None], sigma[None], tau=3000.0)
        n = 100_000
        rs = gen.standard_normal((n, 3))
        losses = (mu + sigma * rs).sum(axis=1)
        draws = [(one_hot(1, 0), rs[i], float(losses[i])) for i in range(n)]
        _, d_mu, _ = nes_gradients(psi, draws, lam=0.0)
        per_draw = losses[:, None] * sigma * rs
        se = per_draw.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(d_mu[0] - sigma**2) < 3 * se)

        # entropy part vs frozen-draw finite differences
        from test_attacks import _entropy_mean_for_nes

        k = 3
        weights = gen.dirichlet(np.ones(k))
        mus = gen.uniform(-1200.0, 1200.0, size=(k, 3))
        sigmas = gen.uniform(150.0, 900.0, size=(k, 3))
        psi = MixtureParams(
            components=[Component(mus[i], sigmas[i], weights[i]) for i in range(k)],
            tau=3000.0,
        )
        frozen = [
            (one_hot(k, int(gen.integers(k))), gen.standard_normal(3), 0.0)
            for _ in range(50)
        ]
        lam = 0.5
        d_omega, d_mu, d_sigma = nes_gradients(psi, frozen, lam=lam)

        def h(w=None, m=None, s=None):
            return _entropy_mean_for_nes(
                weights if w is None else w,
                mus if m is None else m,
                sigmas if s is None else s,
                3000.0,
                frozen,
            )

        for kk in range(k):
            eps = 1e-6
            wp, wm = weights.copy(), weights.copy()
            wp[kk] += eps
            wm[kk] -= eps
            fd = (h(w=wp) - h(w=wm)) / (2 * eps)
            assert d_omega[kk] == pytest.approx(lam * fd, rel=1e-5, abs=1e-9)
            for d in range(3):
                eps_u = 0.3
                mp, mm = mus.copy(), mus.copy()
                mp[kk, d] += eps_u
                mm[kk, d] -= eps_u
                fd = (h(m=mp) - h(m=mm)) / (2 * eps_u)
                assert d_mu[kk, d] == pytest.approx(lam * fd, rel=1e-5, abs=1e-10)
                sp, sm = sigmas.copy(), sigmas.copy()
                sp[kk, d] += eps_u
                sm[kk, d] -= eps_u
                fd = (h(s=sp) - h(s=sm)) / (2 * eps_u)
                assert d_sigma[kk, d] == pytest.approx(lam * fd, rel=1e-5, abs=1e-10)

        elapsed = time.monotonic() - start
        assert elapsed < 60.0, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 5. GP regression and UCB search
# ---------------------------------------------------------------------------


def test_c5_gp_ucb():
    with criterion("C5 gp-ucb"):
        gen = rng.stream(105, "accept.gp")
        bounds = np.array([[-1.0, 1.0]] * 3)

        # noise-free interpolation
        gp = GpState(lengthscale=[0.4] * 3, amplitude=1.3, bounds=bounds, noise=0.0)
        xs = gen.uniform(-1, 1, size=(12, 3))
        ys = gen.normal(size=12)
        for x, y in zip(xs, ys):
            gp.add_observation(x, y)
        for x, y in zip(xs, ys):
            mean, var = gp.posterior(x)
            assert abs(mean - y) < 1e-6 and var < 1e-6

        # dense reimplementation agreement
        from test_gp import dense_posterior, random_gp

        for _ in range(20):
            gp2, tx, ty = random_gp(gen, n=int(gen.integers(4, 25)))
            q = gen.uniform(-1, 1, size=(6, 3))
            mean, var = gp2.posterior(q)
            dmean, dvar = dense_posterior(gp2, tx, ty, q)
            np.testing.assert_allclose(mean, dmean, atol=1e-8)
            np.testing.assert_allclose(var, dvar, atol=1e-8)

        # quadratic bowl: 40 UCB steps land within 0.05 in >= 95/100 seeds
        hits = 0
        for seed in range(100):
            sgen = rng.stream(seed, "accept.bowl")
            theta_star = sgen.uniform(-0.5, 0.5, size=3)

            def f(x):
                return -float(np.sum((x - theta_star) ** 2))

            init = sobol_points(bounds, 6, seed=seed)
            ys0 = [f(x) for x in init]
            bowl = GpState(
                lengthscale=[0.7] * 3,
                amplitude=max(np.var(ys0), 1e-6),
                bounds=bounds,
                noise=1e-6,
                prior_mean=float(np.mean(ys0)),
            )
            for x, y in zip(init, ys0):
                bowl.add_observation(x, y)
            best = max(zip(ys0, init), key=lambda t: t[0])
            for step in range(40):
                x = ucb_next(bowl, beta=2.0, seed=seed * 1000 + step)
                y = f(x)
                bowl.add_observation(x, y)
                if y > best[0]:
                    best = (y, x)
            if np.linalg.norm(best[1] - theta_star) < 0.05:
                hits += 1
        assert hits >= 95, f"bowl hits {hits}/100"


# ---------------------------------------------------------------------------
# 6. attack-ordering experiment
# ---------------------------------------------------------------------------


def test_c6_attack_ordering():
    with criterion("C6 attack-ordering"):
        start = time.monotonic()
        budget = 500
        n_images = 200
        results = {m: [] for m in ("dop", "dop-rd", "dop-loa", "dop-dta")}
        for i in range(n_images):
            image, sites, prior = ordering_instance(i)
            cfg = NesConfig(lr=0.1, population=10, iterations=50, lam=0.01, seed=i)
            runners = {
                "dop": lambda o: dop_transfer(prior, o, image, LABEL, PATCH, rotation=False),
                "dop-rd": lambda o: dop_rd(prior, o, image, LABEL, PATCH,
                                           budget=budget, seed=i, rotation=False),
                "dop-loa": lambda o: dop_loa(prior, o, image, LABEL, PATCH, n_init=10,
                                             budget=budget, seed=i, rotation=False),
                "dop-dta": lambda o: dop_dta(prior, o, image, LABEL, PATCH, cfg,
                                             rotation=False),
            }
            for method, run in runners.items():
                oracle = make_ordering_oracle(image, sites)
                rep = run(oracle)
                # no unaccounted queries: the report matches the counter delta
                assert rep.total_queries == oracle.query_count, (method, i)
                results[method].append(rep)
        summaries = {m: summarize_reports(reps) for m, reps in results.items()}
        asr = {m: s["asr"] for m, s in summaries.items()}
        nq = {m: s["mean_nq_all"] for m, s in summaries.items()}
        print(
            "ordering:",
            {m: (round(asr[m], 3), round(nq[m])) for m in results},
        )
        assert asr["dop-dta"] >= asr["dop-loa"] >= asr["dop-rd"] >= asr["dop"], asr
        assert asr["dop-dta"] - asr["dop-rd"] >= 0.10, asr
        assert nq["dop-dta"] <= nq["dop-rd"], nq
        elapsed = time.monotonic() - start
        assert elapsed < 900.0, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 7. K-sweep trend
# ---------------------------------------------------------------------------


def test_c7_k_sweep_trend():
    with criterion("C7 k-sweep-trend"):
        n_images = 40
        asr, nq = {}, {}
        for k in (1, 3, 5):
            reps = []
            for i in range(n_images):
                image, sites, priors = two_region_instance(i)
                oracle = make_ordering_oracle(image, sites)
                cfg = NesConfig(lr=0.1, population=10, iterations=50, lam=0.01, seed=i)
                reps.append(
                    dop_dta(priors[k], oracle, image, LABEL, PATCH, cfg, rotation=False)
                )
            s = summarize_reports(reps)
            asr[k], nq[k] = s["asr"], s["mean_nq_all"]
        print("k-sweep:", {k: (round(asr[k], 3), round(nq[k])) for k in asr})
        # non-decreasing ASR / non-increasing NQ with one point of slack
        assert asr[3] >= asr[1] - 0.01 and asr[5] >= asr[3] - 0.01, asr
        assert nq[3] <= nq[1] + 1.0 and nq[5] <= nq[3] + 1.0, nq


# ---------------------------------------------------------------------------
# 8. DMAT hardening
# ---------------------------------------------------------------------------


def test_c8_dmat_hardening():
    with criterion("C8 dmat-hardening"):
        start = time.monotonic()
        from patchdist.dmat import DmatConfig, dmat_train

        images, labels, info = make_signature_dataset(
            200, seed=41, backup_strength=0.15, noise=0.05
        )
        patch = PatchSpec(pattern=np.full((10, 10, 3), 0.2), mask=np.ones((10, 10)))
        tau = 3000.0

        standard, _ = train_toy_victim(images, labels, epochs=15, lr=0.1, seed=42)

        def blob_prior(lab, sigma_theta=0.08):
            c = info["primary_placements"][lab]
            mu = np.zeros(3)
            mu[:2] = np.arctanh(np.clip(c, -0.95, 0.95)) * tau
            return MixtureParams(
                components=[Component(mu, np.full(3, sigma_theta * tau), 1.0)], tau=tau
            )

        def probe_asr(victim, budget=300, n_probe=30, seed=7):
            oracle = ClassifierOracle(victim)
            reps = [
                dop_rd(
                    blob_prior(labels[i]), oracle, images[i], int(labels[i]), patch,
                    budget=budget, seed=seed * 100 + i, rotation=False,
                )
                for i in range(n_probe)
            ]
            return summarize_reports(reps)["asr"]

        def clean_accuracy(victim):
            return float(
                np.mean([victim.predict(img) == lab for img, lab in zip(images[150:], labels[150:])])
            )

        pre = probe_asr(standard)
        assert pre >= 0.5, f"planted vulnerability too weak: pre-ASR {pre}"

        cfg = DmatConfig(
            epochs=50, k=3, q=3, lam=0.05, inner_lr=0.05, outer_lr=0.05,
            batch_size=16, seed=43, rotation=False,
        )
        hardened, _, _ = dmat_train(images, labels, patch, cfg)
        post = probe_asr(hardened)
        acc_std, acc_hard = clean_accuracy(standard), clean_accuracy(hardened)
        print(f"dmat: probe ASR {pre:.3f} -> {post:.3f}, clean {acc_std:.3f} -> {acc_hard:.3f}")
        assert post <= 0.5 * pre, (pre, post)
        assert abs(acc_hard - acc_std) <= 0.05, (acc_std, acc_hard)
        elapsed = time.monotonic() - start
        assert elapsed < 1200.0, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 9. determinism: byte-identical replay of every stage
# ---------------------------------------------------------------------------


def _artifact_bytes(run_dir: Path) -> dict:
    skip = {"manifest.json", "replay_config.json"}
    return {
        p.relative_to(run_dir).as_posix(): p.read_bytes()
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def test_c9_determinism_replay(tmp_path):
    with criterion("C9 determinism-replay"):
        from patchdist.imageio import save_dataset

        gen = rng.stream(109, "accept.replay")
        centers = gen.uniform(0.25, 0.75, size=(2, 12, 12, 3))
        centers[1] = np.clip(centers[0] + 0.3, 0, 1)
        labels = np.array([0, 1] * 5)
        images = np.clip(centers[labels] + gen.normal(0, 0.04, size=(10, 12, 12, 3)), 0, 1)
        index = save_dataset(tmp_path / "data", images, labels)

        stages = []
        victim_dir = tmp_path / "victim"
        assert cli_main([
            "victim-train", "--data", str(index), "--out", str(victim_dir),
            "--epochs", "5", "--seed", "3",
        ]) == 0
        stages.append(victim_dir)

        prior_dir = tmp_path / "prior"
        assert cli_main([
            "prior-train", "--data", str(index), "--victim", str(victim_dir / "victim.bin"),
            "--patch", "checker:4", "--out", str(prior_dir),
            "--k", "2", "--epochs", "2", "--q", "2", "--seed", "4",
        ]) == 0
        stages.append(prior_dir)

        attack_dir = tmp_path / "attack"
        assert cli_main([
            "attack", "--method", "dop-rd", "--data", str(index),
            "--victim", str(victim_dir / "victim.bin"),
            "--priors", str(prior_dir / "priors"), "--patch", "checker:4",
            "--out", str(attack_dir), "--seed", "5", "--budget", "20",
        ]) == 0
        stages.append(attack_dir)

        traverse_dir = tmp_path / "traverse"
        assert cli_main([
            "traverse", "--data", str(index), "--victim", str(victim_dir / "victim.bin"),
            "--patch", "checker:4", "--stride", "4", "--out", str(traverse_dir),
            "--seed", "1",
        ]) == 0
        stages.append(traverse_dir)

        dmat_dir = tmp_path / "dmat"
        assert cli_main([
            "dmat", "--data", str(index), "--patch", "checker:4", "--out", str(dmat_dir),
            "--epochs", "1", "--k", "2", "--q", "2", "--inner-lr", "0.05",
            "--outer-lr", "0.05", "--seed", "6",
        ]) == 0
        stages.append(dmat_dir)

        kde_dir = tmp_path / "kde"
        thetas_file = tmp_path / "thetas.json"
        thetas_file.write_text("[[0.1, 0.2, 0.0], [0.15, 0.1, 0.0], [-0.2, 0.3, 0.0]]")
        assert cli_main([
            "kde", "--thetas", str(thetas_file), "--resolution", "16", "--out", str(kde_dir),
        ]) == 0
        stages.append(kde_dir)

        for stage_dir in stages:
            replay_dir = tmp_path / f"replay-{stage_dir.name}"
            assert cli_main([
                "replay", "--manifest", str(stage_dir / "manifest.json"),
                "--out", str(replay_dir),
            ]) == 0
            original = _artifact_bytes(stage_dir)
            replayed = _artifact_bytes(replay_dir)
            assert set(original) <= set(replayed), stage_dir.name
            for name, blob in original.items():
                assert replayed[name] == blob, f"{stage_dir.name}:{name} differs"


# ---------------------------------------------------------------------------
# 10. [SECONDARY] cross-boundary oracle equivalence
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def oracle_service(tmp_path_factory):
    """Launch the HTTP loss-oracle service on a trained toy checkpoint."""
    import requests

    from patchdist.victims import save_victim

    root = tmp_path_factory.mktemp("service")
    gen = rng.stream(110, "accept.service")
    centers = gen.uniform(0.25, 0.75, size=(3, 12, 12, 3))
    labels = gen.integers(0, 3, size=60)
    images = np.clip(centers[labels] + gen.normal(0, 0.05, size=(60, 12, 12, 3)), 0, 1)
    victim, _ = train_toy_victim(images, labels, epochs=8, lr=0.1, seed=11)
    ckpt = root / "victim.bin"
    save_victim(ckpt, victim)

    port = 8471
    proc = subprocess.Popen(
        [sys.executable, "-m", "oracle_service", "--checkpoint", str(ckpt),
         "--host", "127.0.0.1", "--port", str(port)],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    url = f"http://127.0.0.1:{port}"
    try:
        for _ in range(100):
            try:
                if requests.get(f"{url}/metadata", timeout=0.5).status_code == 200:
                    break
            except requests.RequestException:
                time.sleep(0.15)
        else:
            raise RuntimeError("oracle service did not come up")
        yield url, ckpt
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_c10_secondary_cross_boundary(oracle_service):
    with criterion("C10 secondary-cross-boundary"):
        import requests

        from patchdist.victims import load_victim

        url, ckpt = oracle_service
        victim = load_victim(ckpt)  # same float32 weights both sides
        local = ClassifierOracle(victim)
        remote = RemoteOracle(url, task="classification")

        meta = requests.get(f"{url}/metadata", timeout=5).json()
        assert meta["num_classes"] == victim.num_classes
        assert meta["input_dims"] == list(victim.input_dims)
        assert "model_tag" in meta

        gen = rng.stream(111, "accept.crossboundary")
        for i in range(100):
            image = np.round(gen.uniform(size=victim.input_dims).astype(np.float32), 6)
            label = int(gen.integers(victim.num_classes))
            r_local = local.query(image.astype(float), label)
            r_remote = remote.query(image.astype(float), label)
            assert abs(r_local.loss - r_remote.loss) < 1e-5, i
            assert r_local.predicted == r_remote.predicted

        # malformed requests are rejected with 400
        bad = [
            {"task": "classification", "image": "not-base64!!!", "label": 0},
            {"task": "classification", "label": 0},
            {"task": "nonsense", "image": "", "label": 0},
            {"task": "classification", "image": "AAAA", "label": 0},  # wrong size
            {"task": "identification", "image": "AAAA"},  # missing ref on embedder-less model
        ]
        for payload in bad:
            resp = requests.post(f"{url}/loss", json=payload, timeout=5)
            assert resp.status_code == 400, payload
