"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one pass/fail line (see conftest) and the terminal summary
repeats them. The desk-scale learning criteria (8-10) train real models on
the synthetic corpus and take several minutes each; they are marked slow but
run in the default suite.
"""

import math
import multiprocessing
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from condsep.acoustics import SPEED_OF_SOUND, image_source_rir, place_source, RoomSpec
from condsep.conditions import Condition, ConceptValue, Degeneracy, encode_concept
from condsep.corpus import slib_domain, svox_domain, toy_domain
from condsep.evaluation import aggregate_median
from condsep.mixgen import (
    DomainEntry,
    GenerationConfig,
    ToyCorpusSource,
    make_epoch,
    make_eval_set,
    sample_mixture,
)
from condsep.model import ModelConfig, SeparationModel, count_parameters, film_parameter_delta
from condsep.signals import Waveform, energy, si_sdr
from condsep.training import TrainConfig, collate, conditional_loss, pit_loss, train

from conftest import record_criterion
from oracles import brute_force_pit_l1, brute_force_si_sdr, schroeder_t60_oracle

SEED_CORPUS = 3
N_SPEAKERS = 48


def toy_energy_config(rho: float = 0.0, snr_energy: tuple = (1.0, 5.0)):
    domain = toy_domain()
    source = ToyCorpusSource(
        n_speakers=N_SPEAKERS, n_records_per_speaker=3, seed=SEED_CORPUS
    )
    return GenerationConfig(
        domains=(DomainEntry(spec=domain, prior=1.0, source=source, snr_range=(0.0, 5.0)),),
        condition_priors={"TOY": {ConceptValue.E_HIGH: 0.5, ConceptValue.E_LOW: 0.5}},
        degenerate_ratio={Condition.ENERGY: rho} if rho else {},
        snr_range_energy_conditioned=snr_energy,
    )


DESK_MODEL = ModelConfig(
    num_blocks=4, channels=64, encoder_bases=128, kernel_taps=41, hop=20,
    expansion=64, block_depth=4,
)


def median_target_score(model, samples, batch_size=8):
    """Median SI-SDR of the model's target estimate against the true target."""
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x, _refs, c = collate(chunk)
            est = model(x, c)
            for i, s in enumerate(chunk):
                est_t = Waveform(est[i, 0].numpy().astype(np.float64), 8000)
                scores.append(si_sdr(est_t, s.target))
    return float(np.median(scores)), scores


def combined_degenerate_median(model, samples, batch_size=8):
    """Degenerate-pool scores: target slot vs x when everything matches, the
    other slot vs x when nothing does."""
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x, _refs, c = collate(chunk)
            est = model(x, c)
            for i, s in enumerate(chunk):
                est_t = Waveform(est[i, 0].numpy().astype(np.float64), 8000)
                est_o = Waveform(est[i, 1].numpy().astype(np.float64), 8000)
                if s.degeneracy is Degeneracy.ALL_MATCH:
                    scores.append(si_sdr(est_t, s.mixture))
                else:
                    scores.append(si_sdr(est_o, s.mixture))
    return aggregate_median(scores)


class TestCriterion1SiSdrOracle:
    def test_si_sdr_oracle_equivalence(self):
        start = time.time()
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(1000):
            ref = rng.standard_normal(400)
            est = rng.standard_normal(400)
            lib = si_sdr(Waveform(est, 8000), Waveform(ref, 8000))
            oracle = brute_force_si_sdr(est, ref)
            worst = max(worst, abs(lib - oracle))
        scale_worst = 0.0
        for _ in range(200):
            ref = Waveform(rng.standard_normal(400), 8000)
            est = Waveform(rng.standard_normal(400), 8000)
            base = si_sdr(est, ref)
            for gain in (1e-3, 0.5, 7.0, -3.0):
                scale_worst = max(scale_worst, abs(si_sdr(est.scaled(gain), ref) - base))
        elapsed = time.time() - start
        record_criterion(
            1,
            "SI-SDR matches brute-force projection and is scale invariant",
            worst <= 1e-9 and scale_worst <= 1e-9 and elapsed < 5.0,
            f"worst {worst:.2e} dB, scale {scale_worst:.2e} dB, {elapsed:.1f}s",
        )


class TestCriterion2MixtureConsistency:
    def test_forward_outputs_sum_to_mixture(self):
        start = time.time()
        cfg = ModelConfig(
            num_blocks=2, channels=16, encoder_bases=32, expansion=16, block_depth=2
        )
        worst = 0.0
        case = 0
        for model_seed in range(20):
            torch.manual_seed(1000 + model_seed)
            model = SeparationModel(cfg)
            with torch.no_grad():
                for _ in range(5):
                    case += 1
                    g = torch.Generator().manual_seed(case)
                    x = torch.randn(1, 4000, generator=g)
                    concept = ConceptValue(case % 10)
                    c = torch.from_numpy(encode_concept(concept)).float().unsqueeze(0)
                    est = model(x, c)
                    rel = float(
                        torch.linalg.norm(est.sum(dim=1) - x) / torch.linalg.norm(x)
                    )
                    worst = max(worst, rel)
        elapsed = time.time() - start
        record_criterion(
            2,
            "forward outputs are mixture consistent over 100 random cases",
            case == 100 and worst <= 1e-5 and elapsed < 60.0,
            f"worst relative residual {worst:.2e}, {elapsed:.1f}s",
        )


class TestCriterion3FilmAccounting:
    def test_parameter_delta_and_identity_initialization(self):
        conditioned_cfg = ModelConfig()  # paper-scale defaults
        unconditional_cfg = ModelConfig(conditioned=False)
        delta = count_parameters(conditioned_cfg) - count_parameters(unconditional_cfg)
        expected = film_parameter_delta(conditioned_cfg)

        torch.manual_seed(77)
        conditioned = SeparationModel(
            ModelConfig(num_blocks=3, channels=24, encoder_bases=32, expansion=24, block_depth=2)
        )
        unconditional = SeparationModel(
            ModelConfig(
                num_blocks=3, channels=24, encoder_bases=32, expansion=24, block_depth=2,
                conditioned=False,
            )
        )
        shared = {k: v for k, v in conditioned.state_dict().items() if not k.startswith("films.")}
        unconditional.load_state_dict(shared)
        x = torch.randn(2, 3000)
        bit_equal = True
        for concept in (ConceptValue.E_HIGH, ConceptValue.G_MALE, ConceptValue.L_ES):
            c = torch.from_numpy(np.stack([encode_concept(concept)] * 2)).float()
            bit_equal &= torch.equal(conditioned(x, c), unconditional(x))
        record_criterion(
            3,
            "FiLM parameter delta is 2*B*|V|*C and identity init matches unconditional",
            delta == expected == 163840 and bit_equal,
            f"delta {delta}, bit-equal {bit_equal}",
        )


class TestCriterion4GradientCheck:
    def test_analytic_gradients_match_finite_differences(self):
        start = time.time()
        torch.manual_seed(42)
        cfg = ModelConfig(
            num_blocks=2, channels=8, encoder_bases=16, kernel_taps=41, hop=20,
            expansion=8, block_depth=2,
        )
        model = SeparationModel(cfg).double()
        g = torch.Generator().manual_seed(7)
        x = torch.randn(2, 400, generator=g, dtype=torch.float64)
        refs = torch.randn(2, 2, 400, generator=g, dtype=torch.float64)
        c = torch.from_numpy(
            np.stack([encode_concept(ConceptValue.E_HIGH), encode_concept(ConceptValue.L_DE)])
        ).double()

        loss = conditional_loss(model(x, c), refs)
        loss.backward()

        params = dict(model.named_parameters())
        rng = np.random.default_rng(2024)
        eps = 1e-5
        checked = 0
        failures = []
        for name, p in params.items():
            flat = p.detach().view(-1)
            n_coords = min(5, flat.numel())
            coords = rng.choice(flat.numel(), size=n_coords, replace=False)
            for coord in coords:
                with torch.no_grad():
                    original = flat[coord].item()
                    flat[coord] = original + eps
                    up = float(conditional_loss(model(x, c), refs))
                    flat[coord] = original - eps
                    down = float(conditional_loss(model(x, c), refs))
                    flat[coord] = original
                numeric = (up - down) / (2 * eps)
                analytic = float(p.grad.view(-1)[coord])
                checked += 1
                tol = 1e-3 * max(abs(numeric), abs(analytic)) + 1e-8
                if abs(numeric - analytic) > tol:
                    failures.append((name, int(coord), numeric, analytic))
        elapsed = time.time() - start
        record_criterion(
            4,
            "analytic gradients match central finite differences at 1e-3 relative",
            not failures and elapsed < 120.0,
            f"{checked} coordinates, {len(failures)} failures, {elapsed:.1f}s",
        )


def _eval_set_digest(n=100):
    from condsep.mixgen import make_eval_set as mk

    domain = slib_domain()
    source = ToyCorpusSource(n_speakers=24, n_records_per_speaker=2, seed=SEED_CORPUS)
    config = GenerationConfig(
        domains=(DomainEntry(spec=domain, prior=1.0, source=source, snr_range=(0.0, 5.0)),),
        condition_priors={
            "SLIB": {
                ConceptValue.E_HIGH: 0.25,
                ConceptValue.E_LOW: 0.25,
                ConceptValue.S_NEAR: 0.25,
                ConceptValue.S_FAR: 0.25,
            }
        },
        rir_max_order=6,
    )
    samples = mk(config, ConceptValue.S_NEAR, n=n, seed=314, degenerate=False)
    import hashlib

    h = hashlib.sha256()
    for s in samples:
        h.update(s.digest().encode())
    return h.hexdigest()


_WORKER_CONFIG_CACHE = {}


def _worker_digest(index: int) -> str:
    domain = slib_domain()
    source = ToyCorpusSource(n_speakers=24, n_records_per_speaker=2, seed=SEED_CORPUS)
    config = GenerationConfig(
        domains=(DomainEntry(spec=domain, prior=1.0, source=source, snr_range=(0.0, 5.0)),),
        condition_priors={
            "SLIB": {
                ConceptValue.E_HIGH: 0.25,
                ConceptValue.E_LOW: 0.25,
                ConceptValue.S_NEAR: 0.25,
                ConceptValue.S_FAR: 0.25,
            }
        },
        rir_max_order=6,
    )
    return sample_mixture(
        config, "test", index, 314, concept=ConceptValue.S_NEAR, force_degenerate=False
    ).digest()


class TestCriterion5GenerationDeterminismAndPriors:
    def test_bit_determinism_across_processes_and_workers(self):
        start = time.time()
        here = _eval_set_digest()

        script = (
            "import sys; sys.path.insert(0, {p!r}); "
            "import test_acceptance as t; print(t._eval_set_digest())"
        ).format(p=str(Path(__file__).parent))
        proc = subprocess.run(
            [sys.executable, "-c", script], capture_output=True, text=True, check=True
        )
        other_process = proc.stdout.strip().splitlines()[-1]

        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(4) as pool:
            digests = pool.map(_worker_digest, range(100))
        import hashlib

        h = hashlib.sha256()
        for d in digests:
            h.update(d.encode())
        four_workers = h.hexdigest()

        sequential = [_worker_digest(i) for i in range(100)]
        h = hashlib.sha256()
        for d in sequential:
            h.update(d.encode())
        one_worker = h.hexdigest()

        elapsed = time.time() - start
        record_criterion(
            5,
            "100-mixture eval set bit-matches across processes and 1-vs-4 workers",
            here == other_process and one_worker == four_workers and here == one_worker,
            f"{elapsed:.1f}s",
        )

    def test_priors_snr_and_pairing(self):
        start = time.time()
        # empirical domain/concept frequencies over 10,000 samples
        from dataclasses import replace

        toy = toy_domain()
        toy_b = replace(toy, name="TOYB")
        source = ToyCorpusSource(n_speakers=N_SPEAKERS, n_records_per_speaker=3, seed=SEED_CORPUS)
        priors_a = {ConceptValue.E_HIGH: 0.3, ConceptValue.E_LOW: 0.3, ConceptValue.G_FEMALE: 0.4}
        priors_b = {ConceptValue.G_MALE: 0.5, ConceptValue.L_EN: 0.5}
        config = GenerationConfig(
            domains=(
                DomainEntry(spec=toy, prior=0.7, source=source, snr_range=(0.0, 5.0)),
                DomainEntry(spec=toy_b, prior=0.3, source=source, snr_range=(0.0, 5.0)),
            ),
            condition_priors={"TOY": priors_a, "TOYB": priors_b},
        )
        n = 10000
        domain_counts = {"TOY": 0, "TOYB": 0}
        concept_counts: dict = {}
        for i in range(n):
            s = sample_mixture(config, "train", i, 271)
            domain_counts[s.domain] += 1
            concept_counts[(s.domain, s.concept)] = concept_counts.get((s.domain, s.concept), 0) + 1
        priors_ok = True
        for name, p in (("TOY", 0.7), ("TOYB", 0.3)):
            sigma = math.sqrt(n * p * (1 - p))
            priors_ok &= abs(domain_counts[name] - n * p) <= 3 * sigma
        for name, priors, dp in (("TOY", priors_a, 0.7), ("TOYB", priors_b, 0.3)):
            for v, pv in priors.items():
                p = dp * pv
                sigma = math.sqrt(n * p * (1 - p))
                priors_ok &= abs(concept_counts.get((name, v), 0) - n * p) <= 3 * sigma

        # WSJ-range SNR in [0, 5] dB, measured from the waveforms
        snr_ok = True
        wsj_like = toy_energy_config()
        for i in range(500):
            s = sample_mixture(wsj_like, "train", i, 99)
            gap = abs(10.0 * math.log10(energy(s.target) / energy(s.other)))
            snr_ok &= -1e-9 <= gap <= 5.0 + 1e-9

        # SLIB policy: always one near-field and one far-field speaker
        slib = slib_domain()
        slib_config = GenerationConfig(
            domains=(DomainEntry(spec=slib, prior=1.0, source=source, snr_range=(0.0, 5.0)),),
            condition_priors={
                "SLIB": {ConceptValue.G_FEMALE: 0.5, ConceptValue.G_MALE: 0.5}
            },
            spatial_pairing="always_near_far",
            rir_max_order=6,
        )
        pairing_ok = True
        for i in range(200):
            s = sample_mixture(slib_config, "train", i, 55)
            classes = sorted(src.placement.field_class for src in s.sources)
            pairing_ok &= classes == ["far", "near"]

        elapsed = time.time() - start
        record_criterion(
            5,
            "empirical priors within 3 sigma; SNR in range; near/far pairing holds",
            priors_ok and snr_ok and pairing_ok and elapsed < 300.0,
            f"{elapsed:.1f}s",
        )


class TestCriterion6PitCorrectness:
    def test_pit_matches_enumeration_and_oracle_dominates(self):
        start = time.time()
        torch.manual_seed(202)
        enumeration_ok = True
        for _ in range(1000):
            est = torch.randn(2, 64)
            ref = torch.randn(2, 64)
            loss, assignment = pit_loss(est, ref)
            want, perm = brute_force_pit_l1(est.numpy(), ref.numpy())
            enumeration_ok &= abs(loss.item() - want) <= 1e-6 * max(1.0, abs(want))
            enumeration_ok &= tuple(assignment[0].tolist()) == perm

        rng = np.random.default_rng(203)
        oracle_ok = True
        for _ in range(1000):
            target = Waveform(rng.standard_normal(128), 8000)
            est0 = Waveform(rng.standard_normal(128), 8000)
            est1 = Waveform(rng.standard_normal(128), 8000)
            s0, s1 = si_sdr(est0, target), si_sdr(est1, target)
            oracle = max(s0, s1)
            oracle_ok &= oracle >= s0 and oracle >= s1
        elapsed = time.time() - start
        record_criterion(
            6,
            "PIT equals brute-force enumeration; oracle dominates fixed assignments",
            enumeration_ok and oracle_ok and elapsed < 60.0,
            f"{elapsed:.1f}s",
        )


class TestCriterion7RirFidelity:
    def test_t60_and_direct_path(self):
        start = time.time()
        rng = np.random.default_rng(404)
        t60_ok = True
        delay_ok = True
        worst_rel = 0.0
        for trial in range(20):
            if trial % 2 == 0:
                room_ranges = slib_domain().room
            else:
                room_ranges = svox_domain().room
            room = RoomSpec.with_centered_mic(
                float(rng.uniform(*room_ranges.length)),
                float(rng.uniform(*room_ranges.width)),
                float(rng.uniform(*room_ranges.height)),
                float(rng.uniform(*room_ranges.rt60)),
            )
            field = "near" if trial % 4 >= 2 else "far"
            dist_range = room_ranges.near_distance if field == "near" else room_ranges.far_distance
            src = place_source(room, field, dist_range, room_ranges.source_height, rng)
            rir = image_source_rir(room, src, max_order=17, fs=8000)

            estimate = schroeder_t60_oracle(rir.taps, 8000)
            rel = abs(estimate / room.rt60 - 1.0)
            worst_rel = max(worst_rel, rel)
            t60_ok &= rel <= 0.30

            dist = math.dist(src.position, room.mic_position)
            expected_delay = dist / SPEED_OF_SOUND * 8000
            peak = int(np.argmax(np.abs(rir.taps)))
            delay_ok &= abs(peak - expected_delay) <= 1.0
        elapsed = time.time() - start
        record_criterion(
            7,
            "Schroeder T60 within 30% and direct-path delay within 1 sample",
            t60_ok and delay_ok and elapsed < 120.0,
            f"worst T60 error {worst_rel * 100:.0f}%, {elapsed:.1f}s",
        )


@pytest.fixture(scope="module")
def desk_model(tmp_path_factory):
    """Criterion-8 training run, shared with criterion 9."""
    torch.manual_seed(0)
    gen = toy_energy_config()
    config = TrainConfig(
        generation=gen,
        objective="conditional",
        batch_size=6,
        epochs=200,
        epoch_size=64,
        seed=11,
        val_size=0,
        reuse_first_epoch=True,
        max_steps=1500,
        log_every=250,
    )
    model = SeparationModel(DESK_MODEL)
    start = time.time()
    result = train(model, config, tmp_path_factory.mktemp("crit8"))
    elapsed = time.time() - start
    return model, gen, config, result, elapsed


@pytest.mark.slow
class TestCriterion8DeskScaleLearning:
    def test_tiny_model_beats_unprocessed_mixture(self, desk_model):
        model, gen, config, result, elapsed = desk_model
        samples = list(make_epoch(gen, config.epoch_size, config.seed, 0))
        model_median, _ = median_target_score(model, samples)
        baseline = float(np.median([si_sdr(s.mixture, s.target) for s in samples]))
        improvement = model_median - baseline
        record_criterion(
            8,
            "tiny conditioned model improves >= 5 dB over the unprocessed mixture",
            improvement >= 5.0 and result.global_step <= 2000 and elapsed <= 900.0,
            f"improvement {improvement:.2f} dB in {result.global_step} steps, {elapsed / 60:.1f} min",
        )


@pytest.mark.slow
class TestCriterion9ConditioningDiscrimination:
    def test_e_high_estimate_prefers_louder_source(self, desk_model):
        model, gen, _config, _result, _elapsed = desk_model
        held_out = make_eval_set(
            gen, ConceptValue.E_HIGH, n=50, seed=12345, split="test", degenerate=False
        )
        model.eval()
        vs_louder, vs_quieter = [], []
        with torch.no_grad():
            for start in range(0, len(held_out), 10):
                chunk = held_out[start : start + 10]
                x, _refs, c = collate(chunk)
                est = model(x, c)
                for i, s in enumerate(chunk):
                    est_t = Waveform(est[i, 0].numpy().astype(np.float64), 8000)
                    assert energy(s.target) > energy(s.other)
                    vs_louder.append(si_sdr(est_t, s.target))
                    vs_quieter.append(si_sdr(est_t, s.other))
        gap = float(np.median(vs_louder) - np.median(vs_quieter))
        record_criterion(
            9,
            "E_HIGH estimate scores >= 3 dB higher against the louder source",
            gap >= 3.0,
            f"gap {gap:.2f} dB (louder {np.median(vs_louder):.2f}, quieter {np.median(vs_quieter):.2f})",
        )


@pytest.fixture(scope="module")
def degenerate_sweep(tmp_path_factory):
    """Criterion-10 sweep: three models over the degenerate-condition ratio.

    The swept condition is ENERGY: it is relational (no pointwise spectral
    shortcut identifies "the louder speaker"), so a model trained without
    degenerate examples genuinely fails on ambiguous mixtures, reproducing
    the published failure-and-recovery shape. The synthetic corpus's gender
    classes are spectrally disjoint, which hands a gender-conditioned model
    degenerate robustness for free and would make the sweep vacuous.

    Discriminative energy pairs train at a 3-5 dB gap while degenerate pairs
    sit below 1 dB; the margin keeps "no clearly louder speaker" detectable
    within a desk-scale step budget.
    """
    out_root = tmp_path_factory.mktemp("degenerate_sweep")
    results = {}
    start = time.time()
    for rho in (0.0, 0.01, 0.05):
        gen = toy_energy_config(rho, snr_energy=(3.0, 5.0))
        config = TrainConfig(
            generation=gen,
            objective="conditional",
            batch_size=6,
            epochs=10,
            epoch_size=1500,
            seed=21,
            val_size=0,
            log_every=500,
        )
        torch.manual_seed(7)
        model = SeparationModel(DESK_MODEL)
        train(model, config, out_root / f"rho_{rho}")
        disc = make_eval_set(gen, ConceptValue.E_HIGH, n=50, seed=999, split="test", degenerate=False)
        deg = make_eval_set(gen, ConceptValue.E_HIGH, n=50, seed=999, split="test", degenerate=True)
        disc_median, _ = median_target_score(model, disc)
        deg_median = combined_degenerate_median(model, deg)
        results[rho] = {"discriminative": disc_median, "degenerate": deg_median}
    return results, time.time() - start


@pytest.mark.slow
class TestCriterion10DegenerateTrend:
    def test_zero_ratio_model_fails_degenerate_pool(self, degenerate_sweep):
        results, elapsed = degenerate_sweep
        zero = results[0.0]
        best_recovered = max(results[0.01]["degenerate"], results[0.05]["degenerate"])
        degenerate_gap = best_recovered - zero["degenerate"]
        # the discriminative degradation is reported, not bounded
        disc_drop = zero["discriminative"] - min(
            results[0.01]["discriminative"], results[0.05]["discriminative"]
        )
        detail = (
            f"degenerate medians 0%={zero['degenerate']:.2f}, "
            f"1%={results[0.01]['degenerate']:.2f}, 5%={results[0.05]['degenerate']:.2f} dB "
            f"(gap {degenerate_gap:.2f}); discriminative medians "
            f"0%={zero['discriminative']:.2f}, 1%={results[0.01]['discriminative']:.2f}, "
            f"5%={results[0.05]['discriminative']:.2f} dB (drop {disc_drop:.2f}); "
            f"{elapsed / 60:.1f} min"
        )
        record_criterion(
            10,
            "zero-degenerate training is >= 5 dB worse on the degenerate pool",
            degenerate_gap >= 5.0 and elapsed <= 3600.0,
            detail,
        )
