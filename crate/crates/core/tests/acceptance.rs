//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any fails.

use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ui2vec::downstream::{
    confusion, evaluate, finetune, macro_f1, per_class_f1, EvalMode, FinetuneConfig, Split, TaskData, TaskHeads,
};
use ui2vec::encoder::{encode, MaskSpec, Modality, Model, ModelConfig};
use ui2vec::features::{FeatureConfig, FeatureEncoder};
use ui2vec::model::{write_corpus, Corpus, UiExample};
use ui2vec::numerics::{finite_diff_check, FdOptions, Graph, ParamStore};
use ui2vec::pretrain::{
    evaluate_mip, evaluate_rui, loss_mip, loss_mvg, loss_rcp, loss_rui, make_fake_ui, moving_average, prepared_loss,
    pretrain, sample_mask_of, select_negatives, LossBreakdown, MetricsRow, Prepared, PretrainConfig, PretrainHeads,
};
use ui2vec::synth::{generate_corpus, generate_retrieval_pairs, generate_sync_examples, GenConfig};
use ui2vec::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn tiny_setup(seed: u64) -> Result<(Model, PretrainHeads, ParamStore<f64>, Corpus)> {
    let fc = FeatureConfig {
        text_dim: 8,
        patch_dim: 8,
        vocab_size: 64,
    };
    let mc = ModelConfig {
        d: 16,
        n_layers: 1,
        n_heads: 2,
        vocab_size: 64,
        ..ModelConfig::default()
    };
    let fe = FeatureEncoder::new(fc, seed)?;
    let gc = GenConfig {
        seed,
        n_uis: 12,
        components_per_ui: [6, 8],
        ocr_per_ui: [2, 3],
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&gc, fe.vocab())?;
    let mut store = ParamStore::new();
    let model = Model::init(mc, fe, &mut store, seed)?;
    let heads = PretrainHeads::init(&model, &mut store, seed)?;
    Ok((model, heads, store, corpus))
}

/// One masked real UI per modality plus one fake UI.
fn four_cases(corpus: &Corpus, cfg: &PretrainConfig, seed: u64) -> Result<Vec<(String, Prepared)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = &corpus.examples[0];
    let mut out = Vec::new();
    for m in Modality::ALL {
        let mask = sample_mask_of(e, m, cfg, &mut rng)?;
        out.push((format!("real/{m:?}"), Prepared::Real { ui: e.clone(), mask }));
    }
    let (ui, spec) = make_fake_ui(e, &corpus.examples[1], cfg, &mut rng)?;
    out.push(("fake".into(), Prepared::Fake { ui, spec }));
    Ok(out)
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let (model, heads, store, corpus) = tiny_setup(3)?;
    let cfg = PretrainConfig::default();
    let opts = FdOptions {
        rel_tol: 1e-3,
        abs_tol: 1e-6,
        ..FdOptions::default()
    };
    let mut details = Vec::new();
    let mut ok = true;
    for (name, prepared) in four_cases(&corpus, &cfg, 1)? {
        let report = finite_diff_check(
            &store,
            |g: &mut Graph<f64>| prepared_loss(g, &model, &heads, &prepared, &cfg).map(|(v, _)| v),
            opts,
        )?;
        ok &= report.passed && report.checked == store.num_scalars();
        details.push(format!(
            "{name}: {}/{} ok",
            report.checked - report.failures,
            report.checked
        ));
        if let Some(w) = report.worst.filter(|_| !report.passed) {
            details.push(format!(
                "worst {}[{}] {:.3e} vs {:.3e}",
                w.param, w.index, w.analytic, w.numeric
            ));
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    outcome(ok, format!("{}; {:.1}s", details.join(", "), elapsed.as_secs_f64()))
}

fn criterion_2() -> Result<Outcome> {
    let (model, heads, store, corpus) = tiny_setup(5)?;
    let cfg = PretrainConfig::default();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    let mut n = 0;
    for seed in 0..10 {
        for (_, prepared) in four_cases(&corpus, &cfg, seed)? {
            let mut g = Graph::with_params(&store);
            let (_, b) = prepared_loss(&mut g, &model, &heads, &prepared, &cfg)?;
            worst = worst.max((b.recombined() - b.total).abs());
            ok &= composition_holds(&prepared, &b);
            n += 1;
        }
    }
    ok &= worst <= 1e-12;
    outcome(ok, format!("{n} UIs, max |sum - total| = {worst:.1e}"))
}

fn composition_holds(prepared: &Prepared, b: &LossBreakdown) -> bool {
    match prepared {
        Prepared::Fake { .. } => b.l_mip == 0.0 && b.l_mog == 0.0 && b.l_mvg == 0.0 && b.l_rcp > 0.0,
        Prepared::Real { mask, .. } => {
            let parts = [
                (Modality::Img, b.l_mip),
                (Modality::Ocr, b.l_mog),
                (Modality::Vh, b.l_mvg),
            ];
            b.l_rcp == 0.0
                && parts.iter().filter(|(_, v)| *v != 0.0).count() == 1
                && parts.iter().any(|&(m, v)| m == mask.modality && v > 0.0)
        }
    }
}

fn criterion_3() -> Result<Outcome> {
    let (model, heads, store, corpus) = tiny_setup(7)?;
    let cfg = PretrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let e = &corpus.examples[rng.random_range(0..corpus.examples.len())];
        let mask = sample_mask_of(e, Modality::Img, &cfg, &mut rng)?;
        let negs: Vec<Vec<usize>> = mask.indices.iter().map(|&i| select_negatives(e, i, 5)).collect();
        let seq = model.sequence(e, Some(&mask))?;
        let mut g = Graph::with_params(&store);
        let out = encode(&mut g, &model, &seq, None)?;
        let l = loss_mip(&mut g, &out, &mask, &negs)?.expect("IMG mask");
        let d = model.config.d;
        let u = g.data(out.u).to_vec();
        let c = g.data(out.img_content).to_vec();
        let mut brute = 0.0;
        for (&i, neg) in mask.indices.iter().zip(&negs) {
            let ui = &u[out.img_rows[i] * d..][..d];
            let score = |j: usize| (0..d).map(|k| ui[k] * c[j * d + k]).sum::<f64>();
            let scores: Vec<f64> = std::iter::once(i).chain(neg.iter().copied()).map(score).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            brute += z.ln() - scores[0];
        }
        worst = worst.max((g.scalar(l) - brute).abs());
    }
    let nce_ok = worst <= 1e-10;

    let e = &corpus.examples[2];
    let (fake, spec) = make_fake_ui(e, &corpus.examples[3], &cfg, &mut rng)?;
    let seq = model.sequence(&fake, None)?;
    let mut g = Graph::with_params(&store);
    let out = encode(&mut g, &model, &seq, None)?;
    let mut l = Vec::new();
    for lambda in [1.0, 2.0, 4.0] {
        let v = loss_rcp(&mut g, &heads, &out, &spec, lambda)?;
        l.push(g.scalar(v));
    }
    // l(lambda) = a + lambda * b
    let b = l[1] - l[0];
    let lin = (l[2] - (l[0] + 3.0 * b)).abs();
    let lin_ok = lin <= 1e-10 && b > 0.0;
    outcome(
        nce_ok && lin_ok,
        format!("max NCE deviation {worst:.1e} over 100 instances; lambda residual {lin:.1e}"),
    )
}

fn criterion_4() -> Result<Outcome> {
    let (model, heads, mut store, corpus) = tiny_setup(9)?;
    for id in [heads.rui_w, heads.rui_b, heads.class_w, heads.class_b] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut e: UiExample = corpus.examples[0].clone();
    e.vh[0].desc_tokens.clear();
    let mut g = Graph::with_params(&store);
    let out = encode(&mut g, &model, &model.sequence(&e, None)?, None)?;
    let rui = loss_rui(&mut g, &heads, &out, 1.0)?;
    let rui_err = (g.scalar(rui) - 2f64.ln()).abs();

    let mask = MaskSpec {
        modality: Modality::Vh,
        indices: vec![0],
        ocr_positions: Vec::new(),
        mask_desc: true,
        mask_class: true,
    };
    let mut g = Graph::with_params(&store);
    let out = encode(&mut g, &model, &model.sequence(&e, Some(&mask))?, None)?;
    let mvg = loss_mvg(&mut g, &model, &heads, &out, &e, &mask)?.expect("VH mask");
    let mvg_err = (g.scalar(mvg) - 23f64.ln()).abs();

    let mut flat = corpus.examples[1].clone();
    flat.img.truncate(4);
    flat.vh.truncate(4);
    if let Some(l) = flat.icon_labels.as_mut() {
        l.truncate(4)
    }
    let patch = flat.img[0].patch.clone();
    flat.img.iter_mut().for_each(|c| c.patch = patch.clone());
    let mask = MaskSpec {
        modality: Modality::Img,
        indices: vec![0, 2],
        ocr_positions: Vec::new(),
        mask_desc: false,
        mask_class: false,
    };
    let negs: Vec<Vec<usize>> = mask.indices.iter().map(|&i| select_negatives(&flat, i, 3)).collect();
    let mut g = Graph::with_params(&store);
    let out = encode(&mut g, &model, &model.sequence(&flat, Some(&mask))?, None)?;
    let mip = loss_mip(&mut g, &out, &mask, &negs)?.expect("IMG mask");
    let nce_err = (g.scalar(mip) / 2.0 - 4f64.ln()).abs();
    let ok = rui_err < 1e-12 && mvg_err < 1e-12 && nce_err < 1e-12 && negs.iter().all(|n| n.len() == 3);
    outcome(
        ok,
        format!("|l_rui - ln2| {rui_err:.1e}, |class CE - ln23| {mvg_err:.1e}, |NCE - ln4| {nce_err:.1e}"),
    )
}

fn criterion_5() -> Result<Outcome> {
    let fe = FeatureEncoder::new(FeatureConfig::default(), 1)?;
    let corpus = generate_corpus(
        &GenConfig {
            seed: 4,
            n_uis: 5,
            ..GenConfig::default()
        },
        fe.vocab(),
    )?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::init(ModelConfig::default(), fe, &mut store, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for e in &corpus.examples {
        let n = e.img.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut p = e.clone();
        p.img = perm.iter().map(|&j| e.img[j].clone()).collect();
        let (a, rows_a) = encoded_rows(&store, &model, e)?;
        let (b, rows_b) = encoded_rows(&store, &model, &p)?;
        let d = model.config.d;
        for (k, &j) in perm.iter().enumerate() {
            let ra = &a[rows_a.img_rows[j] * d..][..d];
            let rb = &b[rows_b.img_rows[k] * d..][..d];
            worst = ra.iter().zip(rb).fold(worst, |w, (x, y)| w.max((x - y).abs()));
        }
        let fixed: Vec<usize> = std::iter::once(0)
            .chain(rows_a.ocr_rows.clone())
            .chain(rows_a.vh_rows.clone())
            .collect();
        for r in fixed {
            let (ra, rb) = (&a[r * d..][..d], &b[r * d..][..d]);
            worst = ra.iter().zip(rb).fold(worst, |w, (x, y)| w.max((x - y).abs()));
        }
    }
    outcome(worst <= 1e-5, format!("max abs deviation {worst:.2e} (f32)"))
}

struct Rows {
    img_rows: Vec<usize>,
    ocr_rows: Vec<usize>,
    vh_rows: Vec<usize>,
}

fn encoded_rows(store: &ParamStore<f32>, model: &Model, e: &UiExample) -> Result<(Vec<f64>, Rows)> {
    let mut g = Graph::with_params(store);
    let out = encode(&mut g, model, &model.sequence(e, None)?, None)?;
    let u = g.data(out.u).iter().map(|&v| f64::from(v)).collect();
    Ok((
        u,
        Rows {
            img_rows: out.img_rows,
            ocr_rows: out.ocr_rows,
            vh_rows: out.vh_rows,
        },
    ))
}

/// Shared state of the desk-scale run used by criteria 6 to 8.
struct DeskRun {
    model: Model,
    random: ParamStore<f32>,
    trained: ParamStore<f32>,
    corpus: Corpus,
    metrics: Vec<MetricsRow>,
    heads: PretrainHeads,
    held_out: Vec<UiExample>,
    elapsed: Duration,
}

fn desk_run() -> Result<DeskRun> {
    let fe = FeatureEncoder::new(FeatureConfig::default(), 0)?;
    let corpus = generate_corpus(&GenConfig::default(), fe.vocab())?;
    let held_out = generate_corpus(
        &GenConfig {
            seed: 1,
            n_uis: 200,
            ..GenConfig::default()
        },
        fe.vocab(),
    )?
    .examples;
    let mut store = ParamStore::<f32>::new();
    let model = Model::init(ModelConfig::default(), fe, &mut store, 0)?;
    let heads = PretrainHeads::init(&model, &mut store, 0)?;
    let random = store.clone();
    let cfg = PretrainConfig::default();
    let mut metrics = Vec::new();
    let start = Instant::now();
    pretrain(&corpus.examples, &model, &heads, &mut store, &cfg, 1, |m, _| {
        metrics.push(*m);
        Ok(())
    })?;
    Ok(DeskRun {
        model,
        random,
        trained: store,
        corpus,
        metrics,
        heads,
        held_out,
        elapsed: start.elapsed(),
    })
}

fn criterion_6(run: &DeskRun) -> Result<Outcome> {
    let cfg = PretrainConfig::default();
    let totals: Vec<f64> = run.metrics.iter().map(|m| m.total).collect();
    let ma = moving_average(&totals, 50);
    let ratio = ma[1999] / ma[49];
    let rui = evaluate_rui(&run.trained, &run.model, &run.heads, &run.held_out, &cfg, 3)?;
    let (mip, n_mip) = evaluate_mip(&run.trained, &run.model, &run.held_out, &cfg, 3)?;
    let ok = ratio <= 0.6 && rui >= 0.85 && mip >= 0.60 && run.elapsed < Duration::from_secs(900);
    outcome(
        ok,
        format!(
            "MA50 loss {:.3} -> {:.3} (ratio {ratio:.3}); held-out RUI {rui:.3}; masked-IMG {mip:.3} on {n_mip}; {:.0}s",
            ma[49],
            ma[1999],
            run.elapsed.as_secs_f64()
        ),
    )
}

fn criteria_7_8(run: &DeskRun) -> Result<(Outcome, Outcome)> {
    let pairs = generate_retrieval_pairs(&run.corpus, 10, 5000, 32, 8)?;
    let all = TaskData::retrieval(&run.corpus, &pairs)?;
    let test = all.subset(Split::Test);
    let random = evaluate(&run.random, &run.model, None, &all, EvalMode::ZeroShot)?.accuracy;
    let zero_shot = evaluate(&run.trained, &run.model, None, &test, EvalMode::ZeroShot)?.accuracy;
    let c7 = Outcome {
        passed: zero_shot >= 0.20 && (random - 0.10).abs() <= 0.03,
        detail: format!(
            "pretrained {zero_shot:.3} on {} test pairs; random-parameter {random:.3} on {} pairs",
            test.len(),
            all.len()
        ),
    };

    let fcfg = FinetuneConfig::default();
    let mut store = run.trained.clone();
    finetune(
        &mut store,
        &run.model,
        None,
        &all.subset(Split::Train),
        &fcfg,
        4,
        |_, _| Ok(()),
    )?;
    let tuned = evaluate(&store, &run.model, None, &test, EvalMode::Finetuned)?.accuracy;

    let sync = generate_sync_examples(&run.corpus, 0.5, 6)?;
    let data = TaskData::sync(&sync)?;
    let mut store = run.trained.clone();
    let heads = TaskHeads::init(&run.model, &mut store, 32, 7)?;
    finetune(
        &mut store,
        &run.model,
        Some(&heads),
        &data.subset(Split::Train),
        &fcfg,
        4,
        |_, _| Ok(()),
    )?;
    let sync_acc = evaluate(
        &store,
        &run.model,
        Some(&heads),
        &data.subset(Split::Test),
        EvalMode::Finetuned,
    )?
    .accuracy;
    let c8 = Outcome {
        passed: tuned >= zero_shot + 0.10 && sync_acc >= 0.90,
        detail: format!("retrieval {zero_shot:.3} -> {tuned:.3}; sync {sync_acc:.3}"),
    };
    Ok((c7, c8))
}

fn brute_force_macro_f1(truth: &[usize], pred: &[usize], n: usize) -> f64 {
    let mut sum = 0.0;
    for k in 0..n {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p == k).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == k).count() as f64;
        let actual = truth.iter().filter(|&&t| t == k).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / n as f64
}

fn criterion_9() -> Result<Outcome> {
    let hand = macro_f1(&confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2)?);
    let hand_err = (hand - 11.0 / 15.0).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..8);
        let len = rng.random_range(1..60);
        let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let conf = confusion(&truth, &pred, n)?;
        worst = worst.max((macro_f1(&conf) - brute_force_macro_f1(&truth, &pred, n)).abs());
        assert_eq!(per_class_f1(&conf).len(), n);
    }
    outcome(
        hand_err <= 1e-12 && worst <= 1e-12,
        format!("|macro - 11/15| {hand_err:.1e}; max brute-force gap {worst:.1e} on 50 confusions"),
    )
}

/// Corpus file, metrics log and evaluation report of one short run.
fn artifacts(dir: &std::path::Path) -> Result<(Vec<u8>, String, String)> {
    let fe = FeatureEncoder::new(FeatureConfig::default(), 2)?;
    let gc = GenConfig {
        seed: 17,
        n_uis: 200,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&gc, fe.vocab())?;
    let path = dir.join("corpus.jsonl");
    write_corpus(&corpus, &path)?;
    let bytes = std::fs::read(&path).map_err(|e| ui2vec::Error::Invalid(e.to_string()))?;
    let mc = ModelConfig {
        d: 32,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let model = Model::init(mc, fe, &mut store, 2)?;
    let heads = PretrainHeads::init(&model, &mut store, 2)?;
    let cfg = PretrainConfig {
        steps: 20,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let mut log = String::new();
    pretrain(&corpus.examples, &model, &heads, &mut store, &cfg, 5, |m, _| {
        log.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        log.push('\n');
        Ok(())
    })?;
    let pairs = generate_retrieval_pairs(&corpus, 10, 50, 32, 3)?;
    let data = TaskData::retrieval(&corpus, &pairs)?;
    let report = evaluate(&store, &model, None, &data, EvalMode::ZeroShot)?;
    let report = serde_json::to_string(&report).expect("report serializes");
    Ok((bytes, log, report))
}

fn criterion_10() -> Result<Outcome> {
    let a = tempfile::tempdir().map_err(|e| ui2vec::Error::Invalid(e.to_string()))?;
    let b = tempfile::tempdir().map_err(|e| ui2vec::Error::Invalid(e.to_string()))?;
    let (c1, m1, r1) = artifacts(a.path())?;
    let (c2, m2, r2) = artifacts(b.path())?;
    let ok = c1 == c2 && m1 == m2 && r1 == r2 && !c1.is_empty() && m1.lines().count() == 20;
    outcome(
        ok,
        format!(
            "corpus {} bytes, metrics {} lines, report {} bytes identical: {ok}",
            c1.len(),
            m1.lines().count(),
            r1.len()
        ),
    )
}

fn report(n: usize, what: &str, r: std::result::Result<Outcome, String>, failed: &mut usize) {
    match r {
        Ok(o) => {
            if !o.passed {
                *failed += 1;
            }
            println!(
                "{} criterion {n} ({what}): {}",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail
            );
        }
        Err(e) => {
            *failed += 1;
            println!("FAIL criterion {n} ({what}): error: {e}");
        }
    }
}

fn main() {
    let mut failed = 0;
    let f = &mut failed;
    report(1, "gradient fidelity", criterion_1().map_err(|e| e.to_string()), f);
    report(2, "loss composition", criterion_2().map_err(|e| e.to_string()), f);
    report(
        3,
        "NCE oracle and lambda linearity",
        criterion_3().map_err(|e| e.to_string()),
        f,
    );
    report(4, "analytic spot values", criterion_4().map_err(|e| e.to_string()), f);
    report(
        5,
        "permutation equivariance",
        criterion_5().map_err(|e| e.to_string()),
        f,
    );
    let run = desk_run().map_err(|e| e.to_string());
    let c6 = run
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|r| criterion_6(r).map_err(|e| e.to_string()));
    report(6, "pretraining convergence", c6, f);
    match run.and_then(|r| criteria_7_8(&r).map_err(|e| e.to_string())) {
        Ok((c7, c8)) => {
            report(7, "zero-shot advantage", Ok(c7), f);
            report(8, "finetune gain", Ok(c8), f);
        }
        Err(e) => {
            report(7, "zero-shot advantage", Err(e.clone()), f);
            report(8, "finetune gain", Err(e), f);
        }
    }
    report(9, "macro-F1 oracle", criterion_9().map_err(|e| e.to_string()), f);
    report(10, "determinism", criterion_10().map_err(|e| e.to_string()), f);
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
