"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines.  Criteria with stated runtime budgets assert them.
"""

import dataclasses
import json
import shutil
import time

import numpy as np

import promptshift as ps
from promptshift import losses
from promptshift import discriminator as probe
from promptshift.cli import main as cli_main
from promptshift.config import RunLayout, resolve_config
from promptshift.frontend import PerturbationSlots, apply_perturbation, gather_input_rows
from promptshift.methods import prompt_domain_grad
from promptshift.training import ModelBundle, evaluate_split

from conftest import SmallInstance, central_diff, relerr
from oracles import counting_metrics, grid_search_project_2d, t_pvalue_quadrature, welch_statistic


def _verdict(n: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {n:02d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n}: {detail}"


class TestCriterion1Projection:
    def test_projection_correctness(self):
        start = time.time()
        rng = np.random.default_rng(101)
        worst_closed, worst_grid, worst_idem = 0.0, 0.0, 0.0
        for _ in range(1000):
            phi = rng.normal(0.0, rng.uniform(0.3, 3.0), size=2)
            eps = float(rng.uniform(0.05, 3.0))
            got = ps.project(phi[None, :], eps)[0]
            closed = eps * phi / max(eps, np.linalg.norm(phi))
            worst_closed = max(worst_closed,
                               float(np.linalg.norm(got - closed)))
            oracle = grid_search_project_2d(phi, eps)
            worst_grid = max(worst_grid, float(np.linalg.norm(got - oracle)))
            twice = ps.project(got[None, :], eps)[0]
            worst_idem = max(worst_idem, float(np.max(np.abs(twice - got))))
        elapsed = time.time() - start
        ok = (worst_closed < 1e-6 and worst_grid < 1e-6
              and worst_idem < 1e-12 and elapsed < 10.0)
        _verdict(1, ok, f"closed-form {worst_closed:.2e}, grid oracle "
                        f"{worst_grid:.2e}, idempotence {worst_idem:.2e}, "
                        f"{elapsed:.1f}s")


class TestCriterion2Gradients:
    def test_gradient_fidelity(self):
        start = time.time()
        rng = np.random.default_rng(202)
        worst = {"xent/prompt": 0.0, "xent/emb": 0.0, "kl/delta": 0.0,
                 "kl/prompt": 0.0, "adv/delta": 0.0, "adv/disc": 0.0,
                 "disc/disc": 0.0, "lr/prompt": 0.0}
        for trial in range(50):
            inst = SmallInstance(seed=1000 + trial,
                                 dim=int(rng.integers(4, 9)),
                                 n=int(rng.integers(2, 5)),
                                 n_classes=int(rng.integers(2, 4)),
                                 batch=2)
            fr, batch = inst.forward()
            slots = PerturbationSlots.for_batch(batch)
            delta0 = rng.normal(0.0, 0.2,
                                (batch.batch_size, slots.n_max, inst.dim))
            delta0 *= slots.valid[:, :, None]
            p_clean = fr.probs.copy()

            def fwd_pert(delta, prompt_rows=None):
                prompt = (ps.PromptParameters(prompt_rows)
                          if prompt_rows is not None else inst.prompt)
                from promptshift.frontend import assemble_batch
                b = assemble_batch(prompt, inst.table, inst.examples,
                                   total_len=inst.total_len)
                return ps.forward(apply_perturbation(b, delta, slots),
                                  inst.backbone, inst.head)

            # xent gradients w.r.t. prompt and input embeddings
            g = ps.backward(fr, inst.backbone, inst.head,
                            dlogits=losses.xent_grad_logits(fr.probs,
                                                            inst.labels))
            fd_prompt = central_diff(
                lambda x: losses.xent_mean(
                    inst.forward(prompt=ps.PromptParameters(x))[0].probs,
                    inst.labels), inst.prompt.rows.copy())
            worst["xent/prompt"] = max(
                worst["xent/prompt"],
                relerr(fd_prompt, g.d_embeddings[:, :inst.m].sum(axis=0),
                       floor=1e-6))
            fd_emb = central_diff(
                lambda x: losses.xent_mean(inst.forward(embeddings=x)[0].probs,
                                           inst.labels),
                batch.embeddings.copy())
            worst["xent/emb"] = max(worst["xent/emb"],
                                    relerr(fd_emb, g.d_embeddings, floor=1e-6))

            # KL(clean const || pert): delta and prompt routes
            fr_p = fwd_pert(delta0)
            g_kl = ps.backward(fr_p, inst.backbone, inst.head,
                               dlogits=losses.kl_grad_pert_logits(p_clean,
                                                                  fr_p.probs))
            fd_delta = central_diff(
                lambda d: losses.kl_consistency(p_clean, fwd_pert(d).probs),
                delta0.copy())
            worst["kl/delta"] = max(
                worst["kl/delta"],
                relerr(fd_delta, gather_input_rows(g_kl.d_embeddings, slots),
                       floor=1e-6))
            fd_kl_prompt = central_diff(
                lambda x: losses.kl_consistency(p_clean,
                                                fwd_pert(delta0, x).probs),
                inst.prompt.rows.copy())
            worst["kl/prompt"] = max(
                worst["kl/prompt"],
                relerr(fd_kl_prompt, g_kl.d_embeddings[:, :inst.m].sum(axis=0),
                       floor=1e-6))

            # adversarial loss: delta route and probe parameters
            def adv_of(delta):
                return losses.adv_loss(
                    probe.discriminate(fwd_pert(delta).pooled, inst.disc))

            dom = probe.softmax_domain(fr_p.pooled, inst.disc)
            dl = probe.logit_grads(dom, probe.SOURCE_COL)
            g_adv = ps.backward(fr_p, inst.backbone, inst.head,
                                dpooled=probe.pooled_grads(dl, inst.disc))
            fd_adv = central_diff(adv_of, delta0.copy())
            worst["adv/delta"] = max(
                worst["adv/delta"],
                relerr(fd_adv, gather_input_rows(g_adv.d_embeddings, slots),
                       floor=1e-6))
            pg = probe.param_grads(fr_p.pooled, dl)
            fd_w = central_diff(
                lambda w: losses.adv_loss(probe.discriminate(
                    fr_p.pooled, ps.DiscriminatorParams(w=w, b=inst.disc.b))),
                inst.disc.w.copy())
            worst["adv/disc"] = max(worst["adv/disc"],
                                    relerr(fd_w, pg["w"], floor=1e-6))

            # discriminator loss w.r.t. its own parameters
            z_t_pool = rng.normal(size=(2, inst.dim))

            def disc_of(w):
                params = ps.DiscriminatorParams(w=w, b=inst.disc.b)
                return losses.disc_loss(
                    probe.discriminate(fr.pooled, params),
                    probe.discriminate(fr_p.pooled, params),
                    probe.discriminate(z_t_pool, params))

            dl_c = probe.logit_grads(probe.softmax_domain(fr.pooled, inst.disc),
                                     probe.SOURCE_COL)
            dl_p = probe.logit_grads(probe.softmax_domain(fr_p.pooled,
                                                          inst.disc),
                                     probe.SOURCE_COL)
            dl_t = probe.logit_grads(probe.softmax_domain(z_t_pool, inst.disc),
                                     probe.TARGET_COL)
            g_disc = (probe.param_grads(fr.pooled, dl_c)["w"]
                      + probe.param_grads(fr_p.pooled, dl_p)["w"]
                      + probe.param_grads(z_t_pool, dl_t)["w"])
            fd_disc = central_diff(disc_of, inst.disc.w.copy())
            worst["disc/disc"] = max(worst["disc/disc"],
                                     relerr(fd_disc, g_disc, floor=1e-6))

            # full prompt objective with the perturbation held fixed
            def lr_of(prompt_rows):
                fr_c = inst.forward(prompt=ps.PromptParameters(prompt_rows))[0]
                fr_pp = fwd_pert(delta0, prompt_rows)
                return (losses.xent_mean(fr_c.probs, inst.labels)
                        + losses.kl_consistency(p_clean, fr_pp.probs))

            g_c = ps.backward(fr, inst.backbone, inst.head,
                              dlogits=losses.xent_grad_logits(fr.probs,
                                                              inst.labels))
            analytic = (g_c.d_embeddings[:, :inst.m].sum(axis=0)
                        + g_kl.d_embeddings[:, :inst.m].sum(axis=0))
            fd_lr = central_diff(lr_of, inst.prompt.rows.copy())
            worst["lr/prompt"] = max(worst["lr/prompt"],
                                     relerr(fd_lr, analytic, floor=1e-6))

        elapsed = time.time() - start
        bad = {k: v for k, v in worst.items() if v >= 1e-4}
        ok = not bad and elapsed < 60.0
        _verdict(2, ok, f"max rel errs {max(worst.values()):.2e} "
                        f"({', '.join(f'{k}={v:.1e}' for k, v in worst.items())}), "
                        f"{elapsed:.1f}s")


class TestCriterion3BallInvariant:
    def test_full_default_run_no_violations(self):
        pair = ps.generate_pair(ps.DomainPairSpec(seed=0))
        cfg = ps.TrainConfig(seed=1)
        ck = ps.pretrain(pair, "optima", cfg)
        ok = (ck.ball["violations"] == 0 and ck.ball["projections"] > 0)
        _verdict(3, ok, f"{ck.ball['projections']} projections, "
                        f"{ck.ball['violations']} violations over "
                        f"{ck.step} default steps")


def _trajectory(pair, method, cfg):
    hashes = []

    def on_step(state, record):
        hashes.append(state.prompt.rows.tobytes())

    ps.pretrain(pair, method, cfg, on_step=on_step)
    return hashes


class TestCriterion4AblationIdentities:
    def test_trajectory_collapses(self):
        pair = ps.generate_pair(ps.DomainPairSpec(seed=0))
        base = ps.TrainConfig(seed=2, max_steps=200, eval_interval=50)
        vat = _trajectory(pair, "vat", base)
        optima_w0 = _trajectory(pair, "optima",
                                dataclasses.replace(base, adv_weight=0.0))
        a_ok = vat == optima_w0 and len(vat) == 200

        pt = _trajectory(pair, "pt", base)
        optima_dead = _trajectory(pair, "optima",
                                  dataclasses.replace(base, epsilon=0.0,
                                                      ascent_steps=0))
        b_ok = pt == optima_dead and len(pt) == 200
        _verdict(4, a_ok and b_ok,
                 f"(a) adv-weight-0 == vat over 200 steps: {a_ok}; "
                 f"(b) K=0, eps=0 == pt: {b_ok} (bitwise)")


class TestCriterion5GradientIsolation:
    def test_domain_loss_prompt_gradients(self):
        spec = ps.DomainPairSpec(seed=3, n_source=400, n_target=400, n_eval=60)
        pair = ps.generate_pair(spec)
        cfg = ps.TrainConfig(seed=1)
        bundle = ModelBundle.build(cfg, spec)
        backbone = bundle.fresh_backbone()
        rng = np.random.default_rng(55)
        optima_zero = 0
        dann_nonzero = 0
        for trial in range(100):
            prompt = ps.PromptParameters(
                rng.normal(0.0, 0.5, (cfg.prompt_len, cfg.dim)))
            disc = ps.DiscriminatorParams.create(cfg.dim, seed=trial)
            idx = rng.choice(len(pair.source_train), 4, replace=False)
            src = [pair.source_train[i] for i in idx]
            tgt = [pair.target_pool[i] for i in idx]
            g_o = prompt_domain_grad("optima", cfg, bundle, prompt, backbone,
                                     disc, src, tgt)
            g_d = prompt_domain_grad("dann", cfg, bundle, prompt, backbone,
                                     disc, src, tgt)
            optima_zero += bool(np.all(g_o == 0.0))
            dann_nonzero += bool(np.linalg.norm(g_d) > 0.0)
        ok = optima_zero == 100 and dann_nonzero >= 95
        _verdict(5, ok, f"optima domain->prompt gradient exactly zero on "
                        f"{optima_zero}/100; dann nonzero on "
                        f"{dann_nonzero}/100")


class TestCriterion6DirectionalResult:
    def test_zero_shot_target_ordering(self):
        start = time.time()
        pair = ps.generate_pair(ps.DomainPairSpec(seed=0))
        target = {}
        for method in ("pt", "vat", "optima"):
            accs = []
            for seed in (1, 2, 3, 4, 5):
                cfg = ps.TrainConfig(seed=seed)
                bundle = ModelBundle.build(cfg, pair.spec)
                ck = ps.pretrain(pair, method, cfg, bundle)
                accs.append(evaluate_split(pair.target_eval, ck.best_prompt,
                                           bundle, ck.backbone)["accuracy"])
            target[method] = accs
        elapsed = time.time() - start
        wins = sum(o > p for o, p in zip(target["optima"], target["pt"]))
        margin = 100.0 * (np.mean(target["optima"]) - np.mean(target["pt"]))
        vat_gap = np.mean(target["optima"]) - np.mean(target["vat"])
        ok = (wins >= 4 and margin >= 3.0 and vat_gap >= 0.0
              and elapsed < 600.0)
        _verdict(6, ok,
                 f"optima>pt on {wins}/5 seeds, mean margin {margin:+.1f} pts "
                 f"(need >= 3), optima-vat {100 * vat_gap:+.1f} pts, "
                 f"{elapsed:.0f}s "
                 f"[pt={np.mean(target['pt']):.3f} "
                 f"vat={np.mean(target['vat']):.3f} "
                 f"optima={np.mean(target['optima']):.3f}]")


FAST_PIPELINE = [
    "--set", "data.n_source=400", "--set", "data.n_target=400",
    "--set", "data.n_eval=120",
    "--set", "train.max_steps=40", "--set", "train.eval_interval=20",
    "--set", "train.fewshot_steps=8", "--set", "train.fewshot_eval_interval=4",
]


class TestCriterion7ProtocolFidelity:
    def test_fewshot_subcommand_counts(self, tmp_path):
        argv = ["--set", f"run.out_root={tmp_path / 'runs'}"] + FAST_PIPELINE
        assert cli_main(["pretrain", "--method", "optima"] + argv) == 0
        assert cli_main(["fewshot", "--method", "optima"] + argv) == 0
        config = resolve_config(None, [a for a in argv if "=" in a])
        layout = RunLayout(config)
        reports = sorted((layout.root / "reports" / "fewshot").glob("*.json"))
        count_ok = len(reports) == 48
        seeds = set()
        splits = set()
        for path in reports:
            payload = json.loads(path.read_text())
            seeds.add(payload["seed"])
            splits.add(payload["sample_index"])
        structure_ok = seeds == {1, 2, 3} and splits == set(range(1, 17))

        pair = ps.generate_pair(ps.DomainPairSpec(**config["data"]))
        hist_ok = True
        for idx in range(1, 17):
            split = ps.sample_fewshot(pair.target_pool,
                                      pair.target_pool_labels,
                                      pair.spec.n_classes, idx,
                                      config["run"]["split_seed"])
            for part in (split.train, split.dev):
                counts = np.bincount([e.label for e in part], minlength=3)
                hist_ok = hist_ok and counts.tolist() == [8, 8, 8]

        assert cli_main(["report", "--grouping", "fewshot"] + argv) == 0
        agg = json.loads((layout.root / "reports" /
                          "aggregate_fewshot.json").read_text())
        agg_ok = (agg["complete"]
                  and agg["methods"]["optima"]["n_runs"] == 48
                  and agg["methods"]["optima"]["n_values"] == 16)
        ok = count_ok and structure_ok and hist_ok and agg_ok
        _verdict(7, ok, f"48 reports: {count_ok}; 16 splits x 3 seeds: "
                        f"{structure_ok}; exact 8+8 per class: {hist_ok}; "
                        f"seed-first aggregation over 16 values: {agg_ok}")


class TestCriterion8StatisticalOracles:
    def test_ttest_and_metric_oracles(self):
        rng = np.random.default_rng(808)
        worst_p = 0.0
        for _ in range(20):
            a = rng.normal(0.0, 1.0, int(rng.integers(4, 12)))
            b = rng.normal(rng.uniform(-0.5, 0.5), 1.3,
                           int(rng.integers(4, 12)))
            t, p = ps.ttest(a, b)
            t_ref, df = welch_statistic(a, b)
            worst_p = max(worst_p, abs(p - t_pvalue_quadrature(t_ref, df)),
                          abs(t - t_ref))
        metrics_exact = True
        for _ in range(20):
            C = int(rng.integers(2, 5))
            n = int(rng.integers(10, 80))
            preds = rng.integers(0, C, n)
            gold = rng.integers(0, C, n)
            rep = ps.compute_metrics(preds, gold, n_classes=C)
            acc, per_class, confusion = counting_metrics(preds, gold, C)
            metrics_exact = metrics_exact and rep.metrics["accuracy"] == acc \
                and rep.confusion == confusion \
                and all(abs(g["f1"] - w["f1"]) < 1e-12
                        for g, w in zip(rep.per_class, per_class))
        ok = worst_p < 1e-6 and metrics_exact
        _verdict(8, ok, f"t-test vs quadrature oracle {worst_p:.2e} "
                        f"(20 pairs); counting-oracle exact: {metrics_exact}")


class TestCriterion9Determinism:
    def test_two_pipelines_byte_identical(self, tmp_path):
        start = time.time()
        argv = ["--set", f"run.out_root={tmp_path / 'runs'}"] + FAST_PIPELINE

        def pipeline():
            assert cli_main(["generate-data"] + argv) == 0
            assert cli_main(["pretrain", "--method", "optima"] + argv) == 0
            assert cli_main(["fewshot", "--method", "optima"] + argv) == 0
            assert cli_main(["evaluate", "--method", "optima"] + argv) == 0
            assert cli_main(["report"] + argv) == 0
            config = resolve_config(None, [a for a in argv if "=" in a])
            return RunLayout(config).root

        root = pipeline()
        first = {p.relative_to(root): p.read_bytes()
                 for p in sorted(root.rglob("*"))
                 if p.is_file() and p.suffix in (".json", ".jsonl", ".csv",
                                                 ".npy")}
        shutil.rmtree(root)
        root = pipeline()
        second = {p.relative_to(root): p.read_bytes()
                  for p in sorted(root.rglob("*"))
                  if p.is_file() and p.suffix in (".json", ".jsonl", ".csv",
                                                  ".npy")}
        elapsed = time.time() - start
        same_files = set(first) == set(second)
        same_bytes = same_files and all(first[k] == second[k] for k in first)
        ok = same_bytes and len(first) > 50 and elapsed < 900.0
        _verdict(9, ok, f"{len(first)} artifacts byte-identical across two "
                        f"pipelines: {same_bytes}, {elapsed:.0f}s")


class TestCriterion10FrozenContract:
    def test_backbone_digests(self):
        spec = ps.DomainPairSpec(seed=4, n_source=300, n_target=300, n_eval=60)
        pair = ps.generate_pair(spec)
        cfg = ps.TrainConfig(seed=1, max_steps=30, eval_interval=10)
        bundle = ModelBundle.build(cfg, spec)
        fresh = bundle.fresh_backbone().digest()
        frozen_ok = True
        for method in ("pt", "spot", "freelb", "vat", "dann", "optima"):
            ck = ps.pretrain(pair, method, cfg, bundle)
            frozen_ok = frozen_ok and ck.backbone.digest() == fresh
        tuned_changed = True
        for method in ("ft", "pft"):
            ck = ps.pretrain(pair, method, cfg, bundle)
            tuned_changed = tuned_changed and ck.backbone.digest() != fresh
        ok = frozen_ok and tuned_changed
        _verdict(10, ok, f"prompt-mode digests unchanged: {frozen_ok}; "
                         f"ft/pft digests changed: {tuned_changed}")
