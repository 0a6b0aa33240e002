//! Acceptance gate: one pass/fail line per criterion.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use brainage::grid::{min_jacobian_determinant, warp, GridGeometry, ScalarKind, ScalarVolume, VectorField};
use brainage::io::{self, nifti, Format, Volume, VolumeKind};
use brainage::lie::{bch, bracket, compose, exp, flow_rk4, BchOrder, ExpConfig};
use brainage::metrics::{dice, regional_volume_mae, similarity_suite};
use brainage::phantom::{
    make_subject, make_template, smooth_random_field, tapered_random_field, Cohort, Marker, PhantomSpec,
    LABEL_HIPPOCAMPI, LABEL_MARKER, LABEL_PARENCHYMA, LABEL_VENTRICLES,
};
use brainage::register::{register, RegistrationConfig};
use brainage::runspec::{self, RunSpec};
use brainage::synthesis::{synthesize, synthesize_no_pt, CohortSchedule, PhantomTemplates, SynthesisResult, Target};
use brainage::transport::{conjugation_oracle, pole_ladder};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn cube(n: usize) -> GridGeometry {
    GridGeometry::with_dims([n, n, n]).unwrap()
}

thread_local! {
    /// Minimum Jacobian determinant of every deformation emitted by criteria 5–7.
    static EMITTED: RefCell<Vec<(String, f64)>> = const { RefCell::new(Vec::new()) };
}

fn record(name: String, displacement: &VectorField) {
    let j = min_jacobian_determinant(displacement);
    EMITTED.with(|e| e.borrow_mut().push((name, j)));
}

fn record_result(tag: &str, result: &SynthesisResult) {
    record(format!("{tag} exp(subject svf)"), &exp(&result.subject_svf, &ExpConfig::default()).unwrap());
    for t in &result.targets {
        record(format!("{tag} target {}", t.target.age), &t.displacement);
    }
}

/// Fields for criteria 1 and 2: smooth, tapered to zero at the faces.
fn field_family() -> Vec<VectorField> {
    let g = cube(32);
    (0..20).map(|seed| tapered_random_field(&g, seed, 0.375 * 32.0, 5.0)).collect()
}

fn criterion_1() -> Outcome {
    let fields = field_family();
    let cfg = ExpConfig::default();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for v in &fields {
        let a = exp(v, &cfg).unwrap();
        let b = flow_rk4(v, 1.0, 64).unwrap();
        worst = worst.max(a.max_diff_interior(&b, 2).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    (worst < 0.1 && secs < 30.0, format!("max |exp - rk4| = {worst:.4} voxel (< 0.1), runtime {secs:.1} s (< 30)"))
}

fn criterion_2() -> Outcome {
    let cfg = ExpConfig::default();
    let (mut group, mut inverse) = (0.0f64, 0.0f64);
    for v in field_family() {
        let once = exp(&v, &cfg).unwrap();
        let twice = exp(&v.scaled(2.0), &cfg).unwrap();
        group = group.max(compose(&once, &once).unwrap().max_diff_interior(&twice, 2).unwrap());
        let back = exp(&v.neg(), &cfg).unwrap();
        inverse = inverse.max(compose(&once, &back).unwrap().max_norm_interior(2));
    }
    (
        group < 0.1 && inverse < 0.1,
        format!("group law {group:.4} voxel, inverse consistency {inverse:.4} voxel (both < 0.1)"),
    )
}

fn random_generator(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    m * (rng.gen_range(0.5..1.0) * 0.1 / m.norm())
}

fn linear_field(g: GridGeometry, m: &Matrix3<f64>) -> VectorField {
    let c = Vector3::from_fn(|a, _| (g.dims[a] - 1) as f64 / 2.0);
    VectorField::from_fn(g, |[i, j, k]| {
        let d = m * (Vector3::new(i as f64, j as f64, k as f64) - c);
        [d.x as f32, d.y as f32, d.z as f32]
    })
}

fn criterion_3() -> Outcome {
    let g = cube(16);
    let cfg = ExpConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut br, mut bc) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let (vm, um) = (random_generator(&mut rng), random_generator(&mut rng));
        let (v, u) = (linear_field(g, &vm), linear_field(g, &um));
        let commutator = linear_field(g, &(vm * um - um * vm));
        br = br.max(bracket(&v, &u).unwrap().max_diff_interior(&commutator, 2).unwrap());
        let combined = exp(&bch(&v, &u, BchOrder::Second).unwrap(), &cfg).unwrap();
        let product = vm.exp() * um.exp() - Matrix3::identity();
        bc = bc.max(combined.max_diff_interior(&linear_field(g, &product), 2).unwrap());
    }
    (
        br < 1e-3 && bc < 1e-3,
        format!("bracket vs commutator {br:.2e}, exp(bch) vs expm(V)expm(U) {bc:.2e} voxel (both < 1e-3)"),
    )
}

fn criterion_4() -> Outcome {
    let g = cube(24);
    let cfg = ExpConfig::default();
    let mut worst = 0.0f64;
    let mut exact = true;
    for seed in 0..20 {
        let v = tapered_random_field(&g, 100 + seed, 0.375 * 24.0, 3.0);
        let u = tapered_random_field(&g, 200 + seed, 0.375 * 24.0, 2.0);
        let ladder = exp(&pole_ladder(&u, &v).unwrap(), &cfg).unwrap();
        let oracle = conjugation_oracle(&u, &v, &cfg).unwrap();
        worst = worst.max(ladder.max_diff_interior(&oracle, 2).unwrap());
        let zero = VectorField::zeros(g);
        exact &= pole_ladder(&u, &zero).unwrap() == u && pole_ladder(&zero, &v).unwrap() == zero;
    }
    (worst < 0.15 && exact, format!("max |ladder - oracle| = {worst:.4} voxel (< 0.15), exact identities {exact}"))
}

fn criterion_5() -> Outcome {
    let g = cube(64);
    let (template, labels) = make_template(&PhantomSpec::new(g, 70.0, Cohort::Hc)).unwrap();
    let truth = exp(&smooth_random_field(&g, 5, 8.0, 3.0), &ExpConfig::default()).unwrap();
    let (fixed, fixed_labels) = (warp(&template, &truth).unwrap(), warp(&labels, &truth).unwrap());
    let cfg = RegistrationConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let svf = pool.install(|| register(&template, &fixed, &cfg)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let d = exp(&svf, &cfg.exp).unwrap();
    record("registration".into(), &d);
    let recovered = warp(&labels, &d).unwrap();
    let score = |l| dice(&recovered, &fixed_labels, l).unwrap();
    let (p, v, h) = (score(LABEL_PARENCHYMA), score(LABEL_VENTRICLES), score(LABEL_HIPPOCAMPI));
    let j = min_jacobian_determinant(&d);
    (
        p >= 0.95 && v >= 0.90 && h >= 0.90 && j > 0.0 && secs < 120.0,
        format!(
            "Dice parenchyma {p:.3} (>= 0.95), ventricles {v:.3}, hippocampi {h:.3} (>= 0.90), \
             min Jacobian {j:.3} (> 0), {secs:.1} s single-threaded (< 120)"
        ),
    )
}

fn benchmark() -> (PhantomTemplates, ScalarVolume, ScalarVolume) {
    let g = cube(64);
    let templates = PhantomTemplates::benchmark(g);
    let spec = templates.spec(60.0, Cohort::Hc).with_subject(7, Some(Marker::default_for(&g)));
    let (subject, labels) = make_subject(&spec).unwrap();
    (templates, subject, labels)
}

fn schedule(targets: &[(f64, Cohort)]) -> CohortSchedule {
    CohortSchedule {
        baseline_age: 60.0,
        baseline_cohort: Cohort::Hc,
        targets: targets.iter().map(|&(age, cohort)| Target { age, cohort }).collect(),
    }
}

fn label_volumes(result: &SynthesisResult, label: u32) -> Vec<usize> {
    result.targets.iter().map(|t| t.labels.as_ref().unwrap().count_label(label)).collect()
}

fn criterion_6() -> Outcome {
    let (templates, subject, labels) = benchmark();
    let s = schedule(&[(65.0, Cohort::Hc), (70.0, Cohort::Hc), (75.0, Cohort::Hc)]);
    let cfg = RegistrationConfig::default();
    let pt = synthesize(&subject, Some(&labels), &s, &templates, &cfg).unwrap();
    let nopt = synthesize_no_pt(&subject, &s, &templates, &cfg).unwrap();
    record_result("criterion 6 pt", &pt);
    record_result("criterion 6 no-pt", &nopt);
    let marker = |r: &SynthesisResult| -> Vec<f64> {
        r.targets.iter().map(|t| dice(t.labels.as_ref().unwrap(), &labels, LABEL_MARKER).unwrap()).collect()
    };
    let (kept, lost) = (marker(&pt), marker(&nopt));
    let margin = kept.iter().zip(&lost).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
    let ventricles = label_volumes(&pt, LABEL_VENTRICLES);
    let hippocampi = label_volumes(&pt, LABEL_HIPPOCAMPI);
    let ok = kept.iter().all(|&d| d >= 0.85)
        && margin >= 0.05
        && ventricles.windows(2).all(|w| w[0] < w[1])
        && hippocampi.windows(2).all(|w| w[0] > w[1]);
    (
        ok,
        format!(
            "marker Dice {kept:.3?} (>= 0.85), No-PT {lost:.3?}, min margin {margin:.3} (>= 0.05); \
             ventricles {ventricles:?} increasing; hippocampi {hippocampi:?} decreasing"
        ),
    )
}

fn criterion_7() -> Outcome {
    let (templates, subject, labels) = benchmark();
    let s = schedule(&[(65.0, Cohort::Hc), (70.0, Cohort::Hc), (75.0, Cohort::Ad), (80.0, Cohort::Ad)]);
    let result = synthesize(&subject, Some(&labels), &s, &templates, &RegistrationConfig::default()).unwrap();
    record_result("criterion 7", &result);
    let v = label_volumes(&result, LABEL_VENTRICLES);
    let baseline = labels.count_label(LABEL_VENTRICLES);
    let pre = (v[1] as f64 - baseline as f64) / 10.0;
    let post = (v[3] as f64 - v[1] as f64) / 10.0;
    (post > pre, format!("ventricle growth {pre:.1} voxels/yr before the switch at 70, {post:.1} after (must exceed)"))
}

fn criterion_8() -> Outcome {
    let emitted = EMITTED.with(|e| e.borrow().clone());
    if emitted.is_empty() {
        return (false, "no deformations recorded (criteria 5-7 did not run)".into());
    }
    let (name, worst) = emitted.iter().min_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
    (worst > 0.0, format!("{} deformations, lowest min Jacobian {worst:.4} ({name}) (> 0)", emitted.len()))
}

fn random_intensity(g: GridGeometry, rng: &mut ChaCha8Rng) -> ScalarVolume {
    ScalarVolume::intensity(g, (0..g.len()).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
}

/// Explicit-loop reference values: (nfn, mae, psnr, ssim, ncc).
fn brute_force(a: &ScalarVolume, b: &ScalarVolume) -> [f64; 5] {
    let x: Vec<f64> = a.values.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.values.iter().map(|&v| v as f64).collect();
    let n = x.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut norm = 0.0;
    for i in 0..x.len() {
        sq += (x[i] - y[i]) * (x[i] - y[i]);
        abs += (x[i] - y[i]).abs();
        norm += y[i] * y[i];
    }
    let nfn = sq.sqrt() / norm.sqrt();
    let psnr = 10.0 * (1.0 / (sq / n)).log10();
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    let ncc = sxy / (sxx * syy).sqrt();

    let d = a.geometry.dims;
    let w = 7;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for k0 in 0..=d[2] - w {
        for j0 in 0..=d[1] - w {
            for i0 in 0..=d[0] - w {
                let mut px = Vec::new();
                let mut py = Vec::new();
                for k in k0..k0 + w {
                    for j in j0..j0 + w {
                        for i in i0..i0 + w {
                            let idx = i + d[0] * (j + d[1] * k);
                            px.push(x[idx]);
                            py.push(y[idx]);
                        }
                    }
                }
                let m = px.len() as f64;
                let (ux, uy) = (px.iter().sum::<f64>() / m, py.iter().sum::<f64>() / m);
                let vx = px.iter().map(|v| (v - ux).powi(2)).sum::<f64>() / (m - 1.0);
                let vy = py.iter().map(|v| (v - uy).powi(2)).sum::<f64>() / (m - 1.0);
                let cxy = px.iter().zip(&py).map(|(p, q)| (p - ux) * (q - uy)).sum::<f64>() / (m - 1.0);
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    [nfn, abs / n, psnr, total / count, ncc]
}

fn criterion_9() -> Outcome {
    let g = cube(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (a, b) = (random_intensity(g, &mut rng), random_intensity(g, &mut rng));
        let r = similarity_suite(&a, &b).unwrap();
        let got = [r.nfn, r.mae, r.psnr, r.ssim, r.ncc];
        for (x, y) in got.iter().zip(brute_force(&a, &b)) {
            worst = worst.max((x - y).abs() / y.abs().max(f64::MIN_POSITIVE));
        }
    }

    // 4×4×4 brain of 32 labelled voxels; ventricles 8 in truth, 4 in prediction
    let g4 = cube(4);
    let build = |ventricles: usize| {
        let values = (0..64)
            .map(|i| {
                if i < ventricles {
                    2.0
                } else if i < 32 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        ScalarVolume::labels(g4, values).unwrap()
    };
    let regions = BTreeMap::from([("ventricles".to_string(), vec![LABEL_VENTRICLES])]);
    let regional = regional_volume_mae(&build(4), &build(8), &regions).unwrap()["ventricles"];

    // |A| = 3, |B| = 1, |A ∩ B| = 1 → 2·1 / 4
    let mut pred = ScalarVolume::zeros(g4, ScalarKind::Labels);
    let mut truth = ScalarVolume::zeros(g4, ScalarKind::Labels);
    pred.values[..3].fill(1.0);
    truth.values[0] = 1.0;
    let d = dice(&pred, &truth, 1).unwrap();

    (
        worst < 1e-8 && regional == 12.5 && d == 0.5,
        format!(
            "suite vs brute force max rel err {worst:.1e} (< 1e-8), regional MAE {regional} (= 12.5), Dice {d} (= 0.5)"
        ),
    )
}

fn random_volume(rng: &mut ChaCha8Rng) -> Volume {
    let dims = [rng.gen_range(2..9), rng.gen_range(2..9), rng.gen_range(2..9)];
    let spacing = [rng.gen_range(0.2f32..3.0), rng.gen_range(0.2f32..3.0), rng.gen_range(0.2f32..3.0)];
    let origin = [rng.gen_range(-90f32..90.0), rng.gen_range(-90f32..90.0), rng.gen_range(-90f32..90.0)];
    let g = GridGeometry::new(dims, spacing, origin).unwrap();
    let n = g.len();
    match rng.gen_range(0..4) {
        0 => Volume::Scalar(ScalarVolume::intensity(g, (0..n).map(|_| rng.gen_range(-1e3f32..1e3)).collect()).unwrap()),
        1 => Volume::Scalar(ScalarVolume::labels(g, (0..n).map(|_| rng.gen_range(0..300) as f32).collect()).unwrap()),
        kind => {
            let vectors =
                (0..n).map(|_| [rng.gen_range(-9f32..9.0), rng.gen_range(-9f32..9.0), rng.gen_range(-9f32..9.0)]);
            let kind = if kind == 2 { VolumeKind::Svf } else { VolumeKind::Displacement };
            Volume::Field(VectorField::new(g, vectors.collect()).unwrap(), kind)
        }
    }
}

fn bits(volume: &Volume) -> (VolumeKind, GridGeometry, Vec<u32>) {
    let values = match volume {
        Volume::Scalar(s) => s.values.iter().map(|v| v.to_bits()).collect(),
        Volume::Field(f, _) => f.vectors.iter().flatten().map(|v| v.to_bits()).collect(),
    };
    (volume.kind(), *volume.geometry(), values)
}

fn round_trips(volume: &Volume, dir: &Path, stem: &str) -> bool {
    [Format::Nifti, Format::Native].into_iter().all(|format| {
        let path = io::output_path(dir, stem, format);
        io::write_volume(volume, &path, format).unwrap();
        bits(&io::read_volume(&path).unwrap()) == bits(volume)
    })
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let random_ok = (0..50).filter(|i| round_trips(&random_volume(&mut rng), dir.path(), &format!("v{i}"))).count();
    let dims = [208, 176, 160];
    let g = GridGeometry::new(dims, [1.0; 3], [-104.0, -88.0, -80.0]).unwrap();
    let big = Volume::Scalar(random_intensity(g, &mut rng));
    let big_ok = round_trips(&big, dir.path(), "crop");
    let header_dims = nifti::decode(&std::fs::read(dir.path().join("crop.nii")).unwrap()).unwrap().geometry().dims;
    (
        random_ok == 50 && big_ok && header_dims == dims,
        format!("{random_ok}/50 random volumes bit-identical in both formats; [208,176,160] round trip {big_ok}"),
    )
}

fn directory_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect()
}

fn criterion_11() -> Outcome {
    let spec_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../runspecs/golden_phantom.json");
    let mut spec = RunSpec::from_json(&std::fs::read(&spec_path).unwrap()).unwrap();
    let base = spec_path.parent().unwrap();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        spec.output_dir = dir.path().to_path_buf();
        runspec::run(&spec, base).unwrap();
        outputs.push(directory_bytes(dir.path()));
    }
    let identical = outputs[0] == outputs[1];
    let manifest = outputs[0].contains_key(runspec::MANIFEST_NAME);
    (
        identical && manifest,
        format!("{} files per run, byte-identical {identical}, manifest present {manifest}", outputs[0].len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("exponential vs RK4 flow", criterion_1),
        ("group law and inverse consistency", criterion_2),
        ("linear-field bracket and BCH", criterion_3),
        ("pole ladder vs conjugation", criterion_4),
        ("registration recovery", criterion_5),
        ("individualization", criterion_6),
        ("transition schedule", criterion_7),
        ("topology", criterion_8),
        ("metric oracles", criterion_9),
        ("serialization", criterion_10),
        ("determinism", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(outcome) => outcome,
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.1} s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
