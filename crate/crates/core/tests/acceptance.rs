//! Acceptance criteria 1-7, run in order inside one test so that the timed
//! criteria do not compete with each other for the CPU. Each criterion
//! prints one PASS/FAIL line; the test fails if any criterion fails.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use bica_core::config::{Config, Variant};
use bica_core::datasynth::{
    generate_dataset, make_scene, SceneOptions, Vocabulary, EOS, N_CLASSES, PAD,
};
use bica_core::evalmetrics::{bleu4, m_at_k, rouge_l, tokenize, CiderScorer, GtAssignment};
use bica_core::geom::{box_giou_3d, farthest_point_sampling, Box3D};
use bica_core::heads::{beam_search, StepModel};
use bica_core::inference::evaluate_model;
use bica_core::model::BicaModel;
use bica_core::numerics::{Graph, ParamGroup, ParamStore, Tensor};
use bica_core::training::{
    hungarian, model_gradcheck, run_ablation, scst_value, vote_loss, LossWeights, RunOptions,
    Trainer, GRADCHECK_TOL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes past the test harness's output capture so the per-criterion
/// lines show up in a plain `cargo test` run.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Collects failed sub-checks so a criterion reports all of them at once.
#[derive(Default)]
struct Checks(Vec<String>);

impl Checks {
    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.0.push(what.into());
        }
    }

    fn outcome(self, summary: String) -> Outcome {
        if self.0.is_empty() {
            check(true, summary)
        } else {
            check(false, format!("{summary}; failed: {}", self.0.join("; ")))
        }
    }
}

// ---- criterion 1 oracles ----

fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(
        cost: &[f64],
        rows: usize,
        cols: usize,
        r: usize,
        used: &mut [bool],
        acc: f64,
        best: &mut f64,
    ) {
        // the smaller side is matched completely
        if rows <= cols {
            if r == rows {
                *best = best.min(acc);
                return;
            }
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    go(
                        cost,
                        rows,
                        cols,
                        r + 1,
                        used,
                        acc + cost[r * cols + c],
                        best,
                    );
                    used[c] = false;
                }
            }
        } else {
            let t: Vec<f64> = (0..cols * rows)
                .map(|i| cost[(i % rows) * cols + i / rows])
                .collect();
            let mut u = vec![false; rows];
            go(&t, cols, rows, 0, &mut u, 0.0, best);
        }
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; cols.max(rows)];
    go(cost, rows, cols, 0, &mut used, 0.0, &mut best);
    best
}

fn fps_oracle(xyz: &Tensor<f64>, k: usize) -> Vec<usize> {
    let d2 = |a: &[f64], b: &[f64]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut chosen = vec![0usize];
    while chosen.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..xyz.rows() {
            let md = chosen
                .iter()
                .map(|&c| d2(xyz.row(i), xyz.row(c)))
                .fold(f64::INFINITY, f64::min);
            if md > best.0 {
                best = (md, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Next-token distribution indexed by (position, previous token).
struct TableModel {
    vocab: usize,
    table: Vec<Vec<f64>>,
}

impl TableModel {
    fn random(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Self {
        let table = (0..max_len * (vocab + 1))
            .map(|_| {
                let row: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect();
        TableModel { vocab, table }
    }

    fn logprob(&self, tokens: &[usize]) -> f64 {
        (0..tokens.len())
            .map(|t| self.next_logprobs(&[tokens[..t].to_vec()])[0][tokens[t]])
            .sum()
    }
}

impl StepModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_logprobs(&self, partials: &[Vec<usize>]) -> Vec<Vec<f64>> {
        partials
            .iter()
            .map(|s| {
                let prev = s.last().map_or(self.vocab, |&t| t);
                self.table[s.len() * (self.vocab + 1) + prev].clone()
            })
            .collect()
    }
}

/// Best complete sequence by length-normalized log-probability among all
/// sequences that end in EOS or reach `max_len`, never emitting PAD.
fn exhaustive_best(m: &TableModel, max_len: usize) -> Vec<usize> {
    let mut all = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in (0..m.vocab).filter(|&t| t != PAD) {
                let mut n: Vec<usize> = s.clone();
                n.push(t);
                if t == EOS {
                    all.push(n);
                } else {
                    next.push(n);
                }
            }
        }
        frontier = next;
    }
    all.extend(frontier);
    let norm = |s: &Vec<usize>| m.logprob(s) / s.len() as f64;
    all.into_iter()
        .fold(None::<Vec<usize>>, |b, s| match b {
            Some(b) if norm(&b) >= norm(&s) => Some(b),
            _ => Some(s),
        })
        .unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=7);
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(0..50) as f64)
            .collect();
        let a = hungarian(&cost, rows, cols).unwrap();
        let got = a.total(&cost, cols);
        let want = brute_force_assignment(&cost, rows, cols);
        c.expect(
            a.pairs.len() == rows.min(cols),
            format!("hungarian seed {seed}: incomplete"),
        );
        c.expect(
            got == want,
            format!("hungarian seed {seed}: {got} vs {want}"),
        );
    }
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=n);
        let xyz = Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|_| rng.gen_range(0.0..2.0)).collect(),
        )
        .unwrap();
        c.expect(
            farthest_point_sampling(&xyz, k, 0).unwrap() == fps_oracle(&xyz, k),
            format!("fps seed {seed}"),
        );
    }
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        // PAD is never emitted, so a table of 3 or 4 ids has 2 or 3 live tokens
        let vocab = rng.gen_range(3..=4);
        let t = rng.gen_range(1..=3);
        let m = TableModel::random(&mut rng, vocab, t);
        let width = (vocab - 1).pow(t as u32);
        let top = beam_search(&m, width, t).swap_remove(0);
        c.expect(
            top.tokens == exhaustive_best(&m, t),
            format!("beam seed {seed}"),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    c.expect(secs < 30.0, format!("runtime {secs:.1}s >= 30s"));
    c.outcome(format!(
        "200 Hungarian, 100 FPS, 50 beam cases in {secs:.1}s"
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let r = model_gradcheck(&Config::tiny(), 50, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let err = r.max_rel_error();
    let mut c = Checks::default();
    c.expect(
        r.checks.len() == 50,
        format!("{} coordinates", r.checks.len()),
    );
    c.expect(err < GRADCHECK_TOL, format!("max relative error {err:.3e}"));
    for name in [
        "bica.o4c.gamma",
        "bica.c4o.lambda",
        "encoder",
        "inst_decoder",
        "ctx_decoder",
        "heads",
        "caption",
    ] {
        c.expect(
            r.checks.iter().any(|k| k.param.starts_with(name)),
            format!("{name} not probed"),
        );
    }
    c.expect(secs < 120.0, format!("runtime {secs:.1}s >= 120s"));
    c.outcome(format!(
        "max relative error {err:.2e} over {} coordinates in {secs:.1}s",
        r.checks.len()
    ))
}

fn criterion_3() -> Outcome {
    let mut c = Checks::default();
    let cube = |x: f32| Box3D::new([x, 0.0, 0.0], [1.0; 3], 0);
    let a = cube(0.0);
    c.expect(
        (box_giou_3d(&a, &cube(10.0)) + 9.0 / 11.0).abs() < 1e-6,
        "giou -9/11",
    );
    c.expect(
        (box_giou_3d(&a, &cube(0.5)) - 1.0 / 3.0).abs() < 1e-6,
        "giou 1/3",
    );
    c.expect((box_giou_3d(&a, &a) - 1.0).abs() < 1e-6, "giou 1");

    let b = bleu4(&tokenize("the cat sat"), &[tokenize("the cat sat down")]);
    c.expect((b - 0.7165).abs() < 1e-4, format!("bleu4 {b}"));
    let r = rouge_l(&tokenize("a b c d"), &[tokenize("a c d e")]);
    c.expect(r == 0.75, format!("rouge_l {r}"));
    let s = tokenize("the large red box next to the blue box");
    let cider = CiderScorer::new(&[vec![s.clone()]]).score(&s, std::slice::from_ref(&s));
    c.expect((cider - 10.0).abs() < 1e-6, format!("cider {cider}"));

    let assign = [
        GtAssignment {
            pred: Some(0),
            iou: 0.6,
        },
        GtAssignment {
            pred: Some(1),
            iou: 0.3,
        },
    ];
    let m = m_at_k(&assign, &[1.0, 1.0], 0.5);
    c.expect(m == 0.5, format!("m@0.5 {m}"));

    let store = ParamStore::new();
    let mut g = Graph::<f64>::new(&store);
    let gt = [Box3D::new([0.0; 3], [1.0; 3], 0)];
    let p_enc = Tensor::new(vec![1, 3], vec![0.2, 0.0, 0.0]).unwrap();
    let p_o = g.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    let v = vote_loss(&mut g, p_o, &[0], &p_enc, &gt, 0.05);
    let v = g.value(v).item();
    c.expect(v == 1.0, format!("vote {v}"));

    let sc = scst_value(&[10.0, 0.0], 5.0, &[-2.0, -4.0], &[2, 2]);
    c.expect(sc == -5.0, format!("scst {sc}"));
    c.outcome("GIoU, BLEU-4, ROUGE-L, CIDEr, m@k, vote and SCST fixtures".into())
}

fn criterion_4() -> Outcome {
    let mut c = Checks::default();
    let vocab = Vocabulary::standard();
    let paper = Config::paper();

    // paper-scale shapes on one scene
    let mut store = ParamStore::new();
    let model = BicaModel::new(&paper, N_CLASSES, vocab.len(), &mut store, 0);
    let scene = make_scene(3, 4).unwrap();
    let mut g = Graph::<f32>::new(&store);
    let det = model.detect(&mut g, &scene.xyz, &scene.feats);
    let ctx = model.contextualize_detection(&mut g, &det);
    let n_inst = g.shape(det.instance.positions)[0];
    let n_ctx = g.shape(ctx.context.positions)[0];
    c.expect(n_inst == 256, format!("{n_inst} instance queries"));
    c.expect(n_ctx == 64, format!("{n_ctx} context queries"));
    c.expect(
        det.decoded.layers.len() == 8,
        format!("{} decoder layers", det.decoded.layers.len()),
    );
    c.expect(det.preds.len() == 8, "one prediction set per layer");

    // context positions are rows of p_enc
    let p_enc = g.value(det.tokens.p_enc).clone();
    let pc = g.value(ctx.context.positions).clone();
    let subset = (0..pc.rows()).all(|i| (0..p_enc.rows()).any(|j| p_enc.row(j) == pc.row(i)));
    c.expect(subset, "context positions not a subset of p_enc");

    // shared heads: their parameters do not depend on the layer count
    let head_names = |layers: usize| {
        let mut cfg = Config::tiny();
        cfg.dec_layers = layers;
        let mut st = ParamStore::new();
        BicaModel::new(&cfg, N_CLASSES, vocab.len(), &mut st, 0);
        st.iter()
            .filter(|(_, p)| p.name.starts_with("heads."))
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    let h1 = head_names(1);
    c.expect(
        !h1.is_empty() && h1 == head_names(8),
        "localization heads not shared",
    );

    // stage 3 leaves the detector bit-identical
    let mut cfg = Config::tiny();
    cfg.epochs = [2, 2, 2];
    cfg.batch = [1, 1, 1];
    let data = generate_dataset(5, 2, 2, 3, &SceneOptions::default()).unwrap();
    let mut t = Trainer::new(&cfg, &data, 1).unwrap();
    let opts = RunOptions::default();
    t.run_stage(1, &opts).unwrap();
    t.run_stage(2, &opts).unwrap();
    let before = t.store.hash_groups(&[ParamGroup::Detector]);
    let cap_before = t.store.hash_groups(&[ParamGroup::Caption]);
    t.run_stage(3, &opts).unwrap();
    c.expect(
        before == t.store.hash_groups(&[ParamGroup::Detector]),
        "detector changed in stage 3",
    );
    c.expect(
        cap_before != t.store.hash_groups(&[ParamGroup::Caption]),
        "caption branch did not train in stage 3",
    );

    c.expect(paper.beam == 5, format!("beam {}", paper.beam));
    let w = LossWeights::default();
    c.expect(
        w.alpha == [10.0, 1.0, 5.0, 1.0] && paper.alpha == w.alpha,
        "alpha defaults",
    );
    c.expect(
        w.beta == [10.0, 1.0, 5.0] && paper.beta == w.beta,
        "beta defaults",
    );
    c.outcome(format!(
        "{n_inst}/{n_ctx} queries, 8 layers, shared heads, frozen stage-3 detector"
    ))
}

struct PipelineRun {
    checkpoints: Vec<Vec<u8>>,
    report: String,
    steps: u64,
    elapsed: Duration,
    ar50: f64,
    cider50: f64,
}

fn tiny_pipeline(out: &Path, threads: usize) -> PipelineRun {
    let cfg = Config::tiny();
    let data = generate_dataset(cfg.seed, 4, 2, 4, &SceneOptions::default()).unwrap();
    let start = Instant::now();
    let mut t = Trainer::new(&cfg, &data, threads).unwrap();
    t.run_all(&RunOptions {
        out_dir: Some(out.to_path_buf()),
        checkpoint_every: 0,
        stop_at_global_step: None,
    })
    .unwrap();
    let report = evaluate_model(&t.model, &t.store, &data, cfg.nms_iou, cfg.beam, threads).unwrap();
    let elapsed = start.elapsed();
    PipelineRun {
        checkpoints: (1..=3)
            .map(|s| std::fs::read(out.join(format!("stage{s}.ckpt"))).unwrap())
            .collect(),
        report: report.to_text(),
        steps: t.progress.global_step,
        elapsed,
        ar50: report.ar50,
        cider50: report.cider50(),
    }
}

fn criterion_5(run: &PipelineRun) -> Outcome {
    let mut c = Checks::default();
    let mins = run.elapsed.as_secs_f64() / 60.0;
    c.expect(run.ar50 >= 0.9, format!("AR@0.5 {:.3}", run.ar50));
    c.expect(run.cider50 >= 8.0, format!("CIDEr@0.5 {:.3}", run.cider50));
    c.expect(run.steps <= 3000, format!("{} steps", run.steps));
    c.expect(mins < 15.0, format!("{mins:.1} min"));
    c.outcome(format!(
        "AR@0.5 {:.3}, CIDEr@0.5 {:.3} after {} steps in {mins:.1} min",
        run.ar50, run.cider50, run.steps
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut cfg = Config::tiny();
    // four times the scenes of the 4-scene run: same stage-1 step count,
    // shorter caption stages
    cfg.epochs = [100, 75, 25];
    let data = generate_dataset(11, 16, 2, 4, &SceneOptions::default()).unwrap();
    let rep = run_ablation(&cfg, &data, &Variant::ALL, &[1, 2, 3, 4, 5], 1, |r| {
        say(&format!(
            "  ablation {} seed {}: CIDEr@0.5 {:.4}",
            r.variant.as_str(),
            r.seed,
            r.report.cider50()
        ))
    })
    .unwrap();
    say(rep.to_table().trim_end());
    let m = |v| rep.mean_cider50(v).unwrap();
    let (vo, knn, o4c, full) = (
        m(Variant::Vo),
        m(Variant::VoKnn),
        m(Variant::VoO4c),
        m(Variant::Full),
    );
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let mut c = Checks::default();
    c.expect(full >= o4c, "full < vo+o4c");
    c.expect(o4c >= vo, "vo+o4c < vo");
    c.expect(knn >= vo, "vo+knn < vo");
    c.expect(mins < 90.0, format!("{mins:.1} min"));
    c.outcome(format!(
        "mean CIDEr@0.5 full {full:.4}, vo+o4c {o4c:.4}, vo+knn {knn:.4}, vo {vo:.4} in {mins:.1} min"
    ))
}

fn criterion_7(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let mut c = Checks::default();
    for (s, (x, y)) in a.checkpoints.iter().zip(&b.checkpoints).enumerate() {
        c.expect(x == y, format!("stage{} checkpoint differs", s + 1));
    }
    c.expect(a.report == b.report, "reports differ");
    c.outcome("two tiny runs (1 and 3 threads) byte-identical".into())
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, o: Outcome| {
        say(&format!(
            "criterion {n}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ));
        results.push((n, o));
    };
    record(1, criterion_1());
    record(2, criterion_2());
    record(3, criterion_3());
    record(4, criterion_4());
    let dir = tempfile::TempDir::new().unwrap();
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&da).unwrap();
    std::fs::create_dir_all(&db).unwrap();
    let run_a = tiny_pipeline(&da, 1);
    record(5, criterion_5(&run_a));
    record(6, criterion_6());
    let run_b = tiny_pipeline(&db, 3);
    record(7, criterion_7(&run_a, &run_b));
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, o)| format!("{n}: {}", o.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
