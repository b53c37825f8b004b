//! Acceptance gate: eight checks covering the gradient oracle, the
//! projection decomposition, region composition, the forgetting mask,
//! cross-method degeneracies, the headline benchmark orderings, the
//! hyperparameter response, and artifact format stability. Each check prints
//! one summary line, so `cargo test --test acceptance -- --nocapture` reads
//! as a checklist.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rego_core::config::RunConfig;
use rego_core::data::{SyntheticTaskSpec, generate_tasks, write_dataset};
use rego_core::method::{Hyperparams, MethodSpec};
use rego_core::mlp::{
    Activation, GradientSet, OptimizerState, apply_update, build_model, loss_and_gradient,
};
use rego_core::region::{
    DecayConvention, EbbinghausMask, LabelGroup, Localization, RegionMatrix, compose_regions,
    ebbinghaus_mask, memory_matrix, merge_history, read_regions,
};
use rego_core::runner::{SequenceRunner, run_sequence};
use rego_core::surgery::{compose_update_with, project_onto};
use rego_core::tensor::{Matrix, Rng};

fn gate(n: usize, ok: bool, detail: &str) {
    println!("ACCEPTANCE {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance check {n} failed: {detail}");
}

fn random_grads(shapes: &[(usize, usize)], rng: &mut Rng) -> GradientSet {
    let mut g = GradientSet::zeros(shapes).expect("shapes");
    g.for_each_block_mut(|block| {
        for v in block.data_mut() {
            *v = rng.normal();
        }
    });
    g
}

fn bitwise_equal(a: &GradientSet, b: &GradientSet) -> bool {
    let (fa, fb) = (a.flatten(), b.flatten());
    fa.len() == fb.len()
        && fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn criterion_1_backprop_matches_finite_differences() {
    let start = Instant::now();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..20u64 {
        let mut pick = Rng::stream(trial, 0xd1ce);
        let classes = 2 + pick.below(2);
        let mut dims = vec![2 + pick.below(4)];
        for _ in 0..1 + pick.below(2) {
            dims.push(2 + pick.below(7));
        }
        dims.push(classes);
        // The smooth activation keeps central differences clean; a kink
        // within h of a preactivation would poison the estimate.
        let mut model = build_model(&dims, &mut Rng::stream(trial, 0x0de1))
            .expect("model")
            .with_activation(Activation::Tanh);
        assert!(model.param_count() <= 500, "oracle model grew past 500 params");

        let n = 3 + pick.below(3);
        let batch = Matrix::from_vec(
            n,
            dims[0],
            (0..n * dims[0]).map(|_| pick.uniform(-1.5, 1.5)).collect(),
        )
        .expect("batch");
        let labels: Vec<u8> = (0..n).map(|_| pick.below(classes) as u8).collect();

        let analytic = loss_and_gradient(&model, &batch, &labels).expect("gradient").1.flatten();
        let shapes = model.block_shapes();
        let theta = model.params().flatten();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut eval = |flat: &[f64]| {
                let p = GradientSet::from_flat(&shapes, flat).expect("params");
                for (l, pl) in model.layers_mut().iter_mut().zip(&p.layers) {
                    l.weight = pl.weight.clone();
                    l.bias = pl.bias.clone();
                }
                loss_and_gradient(&model, &batch, &labels).expect("loss").0
            };
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-3);
            max_rel = max_rel.max(rel);
        }
        checked += theta.len();
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        1,
        max_rel < 1e-5 && secs < 10.0,
        &format!("20 models, {checked} params, max relative error {max_rel:.2e}, {secs:.1} s"),
    );
}

#[test]
fn criterion_2_projection_decomposition_identities() {
    let start = Instant::now();
    let shapes = [(7usize, 5usize), (7, 1), (3, 7), (3, 1), (2, 16), (2, 1)];
    let mut rng = Rng::stream(2, 0xdec0);
    let mut worst_recon: f64 = 0.0;
    let mut worst_ortho: f64 = 0.0;
    for _ in 0..1000 {
        let g = random_grads(&shapes, &mut rng);
        let reference = random_grads(&shapes, &mut rng);
        let g_p = project_onto(&g, &reference).expect("projection");
        let g_o = g.zip_map(&g_p, |a, b| a - b).expect("complement");
        for ((gl, pl), ol) in g.layers.iter().zip(&g_p.layers).zip(&g_o.layers) {
            let mut dot_po = 0.0;
            let mut norm_g = 0.0;
            let mut norm_p = 0.0;
            for (gb, pb, ob) in [
                (gl.weight.data(), pl.weight.data(), ol.weight.data()),
                (gl.bias.data(), pl.bias.data(), ol.bias.data()),
            ] {
                for i in 0..gb.len() {
                    let recon = (pb[i] + ob[i] - gb[i]).abs();
                    worst_recon = worst_recon.max(recon);
                    dot_po += pb[i] * ob[i];
                    norm_g += gb[i] * gb[i];
                    norm_p += pb[i] * pb[i];
                }
            }
            assert!(norm_p <= norm_g * (1.0 + 1e-12), "projection grew the layer norm");
            if norm_g > 0.0 {
                worst_ortho = worst_ortho.max(dot_po.abs() / norm_g);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        2,
        worst_recon <= 1e-10 && worst_ortho <= 1e-8 && secs < 5.0,
        &format!(
            "1000 pairs x 3 layers: reconstruction <= {worst_recon:.1e}, \
             |g_p.g_o| <= {worst_ortho:.1e} of ||g||^2, norms shrink, {secs:.1} s"
        ),
    );
}

#[test]
fn criterion_3_region_alphabet_and_history_union() {
    let start = Instant::now();
    let shape = GradientSet::zeros(&[(2, 2), (2, 1)]).expect("shape");

    // Composition: every (diverse, stable) label pair sums into 0..=3.
    for diverse_label in [0u8, 2] {
        for stable_label in [0u8, 1] {
            let diverse = Localization {
                labels: rego_core::region::LabelSet::filled_like(&shape, diverse_label),
                group: LabelGroup::Diverse,
            };
            let stable = Localization {
                labels: rego_core::region::LabelSet::filled_like(&shape, stable_label),
                group: LabelGroup::Stable,
            };
            let composed = compose_regions(&diverse, &stable, 1).expect("compose");
            assert!(
                composed.labels.flatten().iter().all(|&l| l == diverse_label + stable_label),
                "composition broke at ({diverse_label}, {stable_label})"
            );
        }
    }

    // Merging: two-task histories reduce to the bitwise union, and a released
    // mask wipes the history regardless of labels.
    let keep = EbbinghausMask::all_ones(&shape, 0.1);
    let mut drop = EbbinghausMask::all_ones(&shape, 0.1);
    drop.bits.for_each_block_mut(|b| b.data_mut().fill(0));
    for first in 0u8..4 {
        for second in 0u8..4 {
            let history = [
                RegionMatrix::uniform(&shape, first, 1),
                RegionMatrix::uniform(&shape, second, 2),
            ];
            let merged = merge_history(&history, &keep).expect("merge");
            assert!(
                merged.labels.flatten().iter().all(|&l| l == first | second),
                "merge broke at ({first}, {second})"
            );
            let wiped = merge_history(&history, &drop).expect("merge");
            assert!(wiped.labels.flatten().iter().all(|&l| l == 0));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        3,
        secs < 1.0,
        &format!("4 composition cases, 16 union pairs, released wipe, {secs:.2} s"),
    );
}

#[test]
fn criterion_4_forgetting_mask_numerics() {
    let start = Instant::now();
    let shape = GradientSet::zeros(&[(2, 2), (2, 1)]).expect("shape");

    // Important in task 1 only, evaluated entering task 3: two elapsed tasks.
    let history = [
        RegionMatrix::uniform(&shape, 3, 1),
        RegionMatrix::uniform(&shape, 0, 2),
    ];
    let m = memory_matrix(&history, 3, DecayConvention::AgeBased).expect("memory");
    let weight = m.values.flatten()[0];
    let exact = (-2.0f64 / 3.0).exp();
    assert!((weight - exact).abs() < 1e-15, "weight {weight} is not exp(-2/3)");
    assert!((weight - 0.51342).abs() < 1e-5, "weight {weight} strays from 0.51342");
    let retained = ebbinghaus_mask(&m, 0.1).expect("mask");
    assert_eq!(retained.released_count(), 0, "a single-task weight fell out at 0.1");

    // Retention is antitone in gamma and memory weight is monotone in the
    // history's labels, over random histories.
    let mut rng = Rng::stream(4, 0xefac);
    for _ in 0..1000 {
        let k = 2 + rng.below(4);
        let base: Vec<RegionMatrix> = (1..k)
            .map(|j| {
                let mut r = RegionMatrix::uniform(&shape, 0, j as u32);
                r.labels.for_each_block_mut(|b| {
                    for v in b.data_mut() {
                        *v = rng.below(4) as u8;
                    }
                });
                r
            })
            .collect();
        let m = memory_matrix(&base, k, DecayConvention::AgeBased).expect("memory");

        let lo = rng.uniform(0.0, 0.7);
        let hi = lo + rng.uniform(0.0, 0.8);
        let mask_lo = ebbinghaus_mask(&m, lo).expect("mask");
        let mask_hi = ebbinghaus_mask(&m, hi).expect("mask");
        for (blo, bhi) in mask_lo.bits.flatten().iter().zip(mask_hi.bits.flatten()) {
            assert!(bhi <= *blo, "raising gamma retained more");
        }

        let mut richer = base.clone();
        for r in &mut richer {
            r.labels.for_each_block_mut(|b| {
                for v in b.data_mut() {
                    if *v == 0 && rng.next_f64() < 0.3 {
                        *v = 1 + rng.below(3) as u8;
                    }
                }
            });
        }
        let m_rich = memory_matrix(&richer, k, DecayConvention::AgeBased).expect("memory");
        for (a, b) in m.values.flatten().iter().zip(m_rich.values.flatten()) {
            assert!(b >= *a, "labeling more entries lowered memory weight");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        4,
        secs < 5.0,
        &format!(
            "single-task weight {weight:.6} retained at 0.1; \
             1000 histories antitone in gamma, monotone in labels, {secs:.1} s"
        ),
    );
}

fn small_config(method: &str, tasks: usize, seed: u64) -> RunConfig {
    let mut params = Hyperparams::default();
    params.epochs = 2;
    params.batch_size = 16;
    params.hidden = vec![16, 8];
    let mut config = RunConfig::default();
    config.method = MethodSpec::new(method, params).expect("method spec");
    config.data = SyntheticTaskSpec {
        tasks,
        dim: 8,
        train_n: 96,
        test_n: 64,
        ..SyntheticTaskSpec::default()
    };
    config.seed = seed;
    config
}

fn run_params(config: RunConfig) -> (GradientSet, Vec<f64>) {
    let tasks = generate_tasks(&config.task_spec()).expect("tasks");
    let mut runner = SequenceRunner::new(config, tasks, None).expect("runner");
    while runner.step().expect("step") {}
    let report = runner.finalize().expect("finalize");
    (runner.model().params(), report.rows[0].values.clone())
}

#[test]
fn criterion_5_degeneracy_equivalences() {
    let start = Instant::now();

    // (a) With a single task there is no history to react to, so the region
    // method and plain finetuning land on bit-identical parameters.
    let (rego_params, rego_values) = run_params(small_config("rego", 1, 21));
    let (ft_params, ft_values) = run_params(small_config("finetune", 1, 21));
    assert!(bitwise_equal(&rego_params, &ft_params), "one-task runs diverged");
    assert_eq!(rego_values, ft_values);

    // (b) All-free regions compose to the raw gradient, bit for bit, and an
    // optimizer step over the composed update matches the plain step.
    let shapes = [(6usize, 4usize), (6, 1), (2, 6), (2, 1)];
    let mut rng = Rng::stream(5, 0xa11f);
    let all_free = RegionMatrix::uniform(&GradientSet::zeros(&shapes).expect("shape"), 0, 2);
    for _ in 0..100 {
        let g = random_grads(&shapes, &mut rng);
        let reference = random_grads(&shapes, &mut rng);
        let composed = compose_update_with(&g, &reference, &all_free, 0.3).expect("compose");
        assert!(bitwise_equal(&composed, &g), "all-free composition altered the gradient");
    }
    let mut model_a = build_model(&[4, 6, 2], &mut Rng::stream(5, 0x51de)).expect("model");
    let mut model_b = model_a.clone();
    let mut opt_a = OptimizerState::adam(1e-3);
    let mut opt_b = OptimizerState::adam(1e-3);
    let g = random_grads(&shapes, &mut rng);
    let reference = random_grads(&shapes, &mut rng);
    let composed = compose_update_with(&g, &reference, &all_free, 0.9).expect("compose");
    apply_update(&mut model_a, &g, &mut opt_a).expect("step");
    apply_update(&mut model_b, &composed, &mut opt_b).expect("step");
    assert!(
        bitwise_equal(&model_a.params(), &model_b.params()),
        "all-free step diverged from the plain step"
    );

    // (c) Over two tasks every retained weight exceeds 0.1, so the forgetting
    // mask never fires and the ablation without it is bit-identical.
    let (full, full_values) = run_params(small_config("rego", 2, 23));
    let (no_mask, no_mask_values) = run_params(small_config("rego-no-efm", 2, 23));
    assert!(bitwise_equal(&full, &no_mask), "mask fired on a two-task run at gamma 0.1");
    assert_eq!(full_values, no_mask_values);

    let secs = start.elapsed().as_secs_f64();
    gate(
        5,
        secs < 120.0,
        &format!(
            "one-task bitwise match, all-free composition is identity, \
             two-task mask is a no-op, {secs:.1} s"
        ),
    );
}

struct MethodOutcome {
    mean_avg_eer: f64,
    slowest_run_secs: f64,
}

struct BenchmarkGrid {
    replay: MethodOutcome,
    rego: MethodOutcome,
    finetune: MethodOutcome,
    ortho: MethodOutcome,
    rego_alpha_low: MethodOutcome,
    rego_alpha_high: MethodOutcome,
    released_by_gamma: Vec<(f64, usize)>,
}

const BENCHMARK_SEEDS: u64 = 5;

/// Runs the full benchmark grid once: the four ordering methods plus two
/// off-center importance percentiles, five seeds each, on worker threads.
/// The seed-0 run of the headline method keeps its region archives so the
/// forgetting-mask census can reuse them.
fn benchmark_grid() -> &'static BenchmarkGrid {
    static GRID: OnceLock<BenchmarkGrid> = OnceLock::new();
    GRID.get_or_init(|| {
        let variants: [(&str, f64); 6] = [
            ("replay-all", 0.75),
            ("rego", 0.75),
            ("finetune", 0.75),
            ("ortho-all", 0.75),
            ("rego", 0.5),
            ("rego", 0.95),
        ];
        let mut jobs = Vec::new();
        for (vi, _) in variants.iter().enumerate() {
            for seed in 0..BENCHMARK_SEEDS {
                jobs.push((vi, seed));
            }
        }
        let results: Mutex<Vec<(usize, u64, f64, f64)>> = Mutex::new(Vec::new());
        let regions: Mutex<Vec<RegionMatrix>> = Mutex::new(Vec::new());
        let cursor = AtomicUsize::new(0);
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4).min(8);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::Relaxed);
                    let Some(&(vi, seed)) = jobs.get(i) else { break };
                    let (name, alpha) = variants[vi];
                    let mut params = Hyperparams::default();
                    params.alpha = alpha;
                    let mut config = RunConfig::default();
                    config.method = MethodSpec::new(name, params).expect("method spec");
                    config.seed = seed;
                    let tasks = generate_tasks(&config.task_spec()).expect("tasks");
                    let started = Instant::now();
                    let keep_regions = name == "rego" && alpha == 0.75 && seed == 0;
                    let avg = if keep_regions {
                        let dir = tempfile::tempdir().expect("tempdir");
                        let report =
                            run_sequence(config, tasks, Some(dir.path())).expect("sequence");
                        let mut archived = Vec::new();
                        for task in 1..=3 {
                            let path = dir.path().join(format!("task{task:02}.rgrm"));
                            archived.push(read_regions(&path).expect("regions"));
                        }
                        *regions.lock().unwrap() = archived;
                        mean(&report.rows[0].values)
                    } else {
                        let mut runner =
                            SequenceRunner::new(config, tasks, None).expect("runner");
                        while runner.step().expect("step") {}
                        let report = runner.finalize().expect("finalize");
                        mean(&report.rows[0].values)
                    };
                    let secs = started.elapsed().as_secs_f64();
                    results.lock().unwrap().push((vi, seed, avg * 100.0, secs));
                });
            }
        });
        let results = results.into_inner().unwrap();
        let outcome = |vi: usize| {
            let rows: Vec<&(usize, u64, f64, f64)> =
                results.iter().filter(|r| r.0 == vi).collect();
            assert_eq!(rows.len(), BENCHMARK_SEEDS as usize, "a grid run went missing");
            MethodOutcome {
                mean_avg_eer: rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64,
                slowest_run_secs: rows.iter().map(|r| r.3).fold(0.0, f64::max),
            }
        };

        let history = regions.into_inner().unwrap();
        assert_eq!(history.len(), 3, "region archives were not captured");
        let m = memory_matrix(&history, 4, DecayConvention::AgeBased).expect("memory");
        let released_by_gamma = [0.1, 0.3, 0.5, 0.7, 0.9]
            .into_iter()
            .map(|gamma| {
                let mask = ebbinghaus_mask(&m, gamma).expect("mask");
                (gamma, mask.released_count())
            })
            .collect();

        BenchmarkGrid {
            replay: outcome(0),
            rego: outcome(1),
            finetune: outcome(2),
            ortho: outcome(3),
            rego_alpha_low: outcome(4),
            rego_alpha_high: outcome(5),
            released_by_gamma,
        }
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criterion_6_benchmark_orderings() {
    let grid = benchmark_grid();
    let (replay, rego, ft, ortho) = (
        grid.replay.mean_avg_eer,
        grid.rego.mean_avg_eer,
        grid.finetune.mean_avg_eer,
        grid.ortho.mean_avg_eer,
    );
    let slowest = [&grid.replay, &grid.rego, &grid.finetune, &grid.ortho]
        .iter()
        .map(|o| o.slowest_run_secs)
        .fold(0.0, f64::max);
    let ok = replay <= rego && rego < ft && rego <= 0.9 * ft && rego <= ortho && slowest < 600.0;
    gate(
        6,
        ok,
        &format!(
            "mean Avg-EER over {BENCHMARK_SEEDS} seeds: replay {replay:.2} <= rego {rego:.2} \
             < finetune {ft:.2} (rel {:.1}% >= 10%), rego <= ortho {ortho:.2}, \
             slowest run {slowest:.0} s < 600 s",
            (ft - rego) / ft * 100.0
        ),
    );
}

#[test]
fn criterion_7_hyperparameter_response() {
    let grid = benchmark_grid();
    let (low, center, high) = (
        grid.rego_alpha_low.mean_avg_eer,
        grid.rego.mean_avg_eer,
        grid.rego_alpha_high.mean_avg_eer,
    );
    // Tie allowance for "best or tied" across seeds: a quarter point of EER,
    // under the per-seed spread observed on this benchmark.
    let tie = 0.25;
    let alpha_ok = center <= low + tie && center <= high + tie;

    let counts: Vec<usize> = grid.released_by_gamma.iter().map(|&(_, c)| c).collect();
    let monotone = counts.windows(2).all(|w| w[1] >= w[0]);
    let census: Vec<String> = grid
        .released_by_gamma
        .iter()
        .map(|(g, c)| format!("{g:.1}:{c}"))
        .collect();
    gate(
        7,
        alpha_ok && monotone,
        &format!(
            "alpha means 0.5 -> {low:.2}, 0.75 -> {center:.2}, 0.95 -> {high:.2} \
             (0.75 best or tied within {tie}); released entries by gamma {}",
            census.join(", ")
        ),
    );
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("read dir")
        .map(|e| {
            let e = e.expect("entry");
            let name = e.file_name().into_string().expect("utf8 name");
            let bytes = fs::read(e.path()).expect("read file");
            (name, bytes)
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn criterion_8_artifact_bytes_are_reproducible() {
    let start = Instant::now();
    let mut seen = BTreeSet::new();
    let mut files = 0usize;

    // Two independent runs per method, plus two dataset exports, must agree
    // byte for byte on every artifact.
    for method in ["rego", "ewc"] {
        let mut config = small_config(method, 3, 3);
        config.eval_matrix = true;
        let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
        for dir in &dirs {
            let tasks = generate_tasks(&config.task_spec()).expect("tasks");
            run_sequence(config.clone(), tasks, Some(dir.path())).expect("sequence");
        }
        let (a, b) = (dir_snapshot(dirs[0].path()), dir_snapshot(dirs[1].path()));
        assert_eq!(
            a.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            b.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            "{method} reruns produced different artifact sets"
        );
        for ((name, left), (_, right)) in a.iter().zip(&b) {
            assert_eq!(left, right, "{method} artifact {name} differs between reruns");
            if let Some((_, ext)) = name.rsplit_once('.') {
                seen.insert(ext.to_string());
            }
            files += 1;
        }
    }

    let spec = SyntheticTaskSpec { tasks: 2, dim: 8, train_n: 64, test_n: 32, seed: 3, ..SyntheticTaskSpec::default() };
    let exports = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    for dir in &exports {
        for (k, task) in generate_tasks(&spec).expect("tasks").iter().enumerate() {
            write_dataset(&task.train, &dir.path().join(format!("task{:02}_train.rgfd", k + 1)))
                .expect("write");
            write_dataset(&task.test, &dir.path().join(format!("task{:02}_test.rgfd", k + 1)))
                .expect("write");
        }
    }
    let (a, b) = (dir_snapshot(exports[0].path()), dir_snapshot(exports[1].path()));
    for ((name, left), (_, right)) in a.iter().zip(&b) {
        assert_eq!(left, right, "dataset export {name} differs between reruns");
        seen.insert("rgfd".to_string());
        files += 1;
    }

    let covered = ["csv", "rgfd", "rggm", "rgmw", "rgrm"]
        .iter()
        .all(|ext| seen.contains(*ext));
    let secs = start.elapsed().as_secs_f64();
    gate(
        8,
        covered,
        &format!(
            "{files} artifacts byte-identical across reruns, formats {{{}}}, {secs:.1} s",
            seen.iter().cloned().collect::<Vec<_>>().join(", ")
        ),
    );
}
