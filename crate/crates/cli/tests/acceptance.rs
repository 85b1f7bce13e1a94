//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `PROPAUDIT_SMOKE=1` runs the calibration criteria
//! with 50 trials instead of 200.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use propaudit_core::seed;
use propaudit_core::symmetry::{eye_level_deviation, midline_deviation, LandmarkSet, Point};
use propaudit_core::synth::{ks_uniform, TestCalibration};
use propaudit_core::trend::mean_accuracy;
use propaudit_core::{
    aggregate_usage, calibration_run, cmi_knn_estimate, generate_pipeline_fixture, hsic_statistic,
    median_heuristic_bandwidth, rbf_gram, run_audit, AuditConfig, CiTest, ScmKind, ScmSpec, SignificanceTable,
    TestId,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normals(rng: &mut seed::SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn hsic_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..25u64 {
        let mut rng = seed::rng(seed::derive(11, case));
        let n = rng.random_range(2..=20);
        let dx = rng.random_range(1..=3);
        let dy = rng.random_range(1..=3);
        let x = DMatrix::from_vec(n, dx, normals(&mut rng, n * dx));
        let y = DMatrix::from_vec(n, dy, normals(&mut rng, n * dy));
        let (bx, by) = (
            median_heuristic_bandwidth(&x).map_err(|e| e.to_string())?,
            median_heuristic_bandwidth(&y).map_err(|e| e.to_string())?,
        );
        let got = hsic_statistic(&rbf_gram(&x, bx).unwrap(), &rbf_gram(&y, by).unwrap()).map_err(|e| e.to_string())?;

        let gram = |m: &DMatrix<f64>, bw: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let d2: f64 = (0..m.ncols()).map(|c| (m[(i, c)] - m[(j, c)]).powi(2)).sum();
                            (-d2 / (2.0 * bw * bw)).exp()
                        })
                        .collect()
                })
                .collect()
        };
        let (kx, ky) = (gram(&x, bx), gram(&y, by));
        let centered = |k: &Vec<Vec<f64>>, i: usize, j: usize| -> f64 {
            let nf = n as f64;
            let row: f64 = k[i].iter().sum::<f64>() / nf;
            let col: f64 = (0..n).map(|a| k[a][j]).sum::<f64>() / nf;
            let all: f64 = k.iter().flatten().sum::<f64>() / (nf * nf);
            k[i][j] - row - col + all
        };
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..n {
                want += centered(&kx, i, j) * centered(&ky, i, j);
            }
        }
        want /= (n * n) as f64;
        worst = worst.max((got - want).abs());
    }
    verdict(worst <= 1e-10, format!("max |Δ| = {worst:.2e} over 25 fixtures"))
}

fn cmi_accuracy() -> Outcome {
    let n = 2000;
    let rho: f64 = 0.8;
    let truth = -0.5 * (1.0 - rho * rho).ln();
    let z = DMatrix::<f64>::zeros(n, 0);
    let (mut dep, mut ind) = (0.0, 0.0);
    for s in 0..20u64 {
        let mut rng = seed::rng(seed::derive(21, s));
        let a = normals(&mut rng, n);
        let b = normals(&mut rng, n);
        let y: Vec<f64> = a.iter().zip(&b).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect();
        dep += cmi_knn_estimate(&a, &y, &z, 10, s).map_err(|e| e.to_string())? / 20.0;
        ind += cmi_knn_estimate(&a, &b, &z, 10, s).map_err(|e| e.to_string())? / 20.0;
    }
    verdict(
        (dep - truth).abs() <= 0.05 && ind.abs() <= 0.05,
        format!("dependent mean {dep:.4} (truth {truth:.4}), independent mean {ind:.4}"),
    )
}

fn committee() -> Vec<Box<dyn CiTest>> {
    let config = AuditConfig::default();
    TestId::ALL.iter().map(|&id| config.build_test(id)).collect()
}

fn calibrate(kind: ScmKind, trials: usize) -> Result<Vec<TestCalibration>, String> {
    let tests = committee();
    let refs: Vec<&dyn CiTest> = tests.iter().map(|t| t.as_ref()).collect();
    let spec = ScmSpec {
        kind,
        n: 500,
        effect_size: 0.5,
        seed: 2024,
        ..Default::default()
    };
    let report = calibration_run(&refs, &spec, trials, 0.05).map_err(|e| e.to_string())?;
    for r in &report.results {
        if !r.failures.is_empty() {
            return Err(format!("{}: {} failed trials", r.test, r.failures.len()));
        }
    }
    Ok(report.results)
}

fn rates(results: &[TestCalibration], ok: impl Fn(f64) -> bool) -> Outcome {
    let detail = results
        .iter()
        .map(|r| format!("{} {:.3}", r.test, r.rate))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(results.iter().all(|r| ok(r.rate)), format!("{detail} over {} trials", results[0].trials))
}

fn ks(results: &[TestCalibration]) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for r in results {
        let (d, p) = ks_uniform(&r.p_values);
        ok &= p > 0.01;
        parts.push(format!("{} D={d:.3} p={p:.3}", r.test));
    }
    verdict(ok, parts.join(", "))
}

fn pipeline_fidelity() -> Outcome {
    let mut agree: BTreeMap<(String, String), usize> = BTreeMap::new();
    for s in 0..20u64 {
        let spec = ScmSpec {
            kind: ScmKind::PipelineFixture,
            n: 700,
            effect_size: 1.0,
            classes: 7,
            seed: seed::derive(31, s),
            ..Default::default()
        };
        let (dataset, truth) = generate_pipeline_fixture(&spec).map_err(|e| e.to_string())?;
        let config = AuditConfig {
            alpha: 0.01,
            seed: s,
            ..Default::default()
        };
        let table = run_audit(&dataset, &config).map_err(|e| e.to_string())?;
        for cell in &truth.cells {
            let got = table
                .cell(&cell.property, &cell.class)
                .ok_or_else(|| format!("missing cell {} / {}", cell.property, cell.class))?;
            let hit = got.skipped.is_none() && got.significant == cell.dependent;
            *agree.entry((cell.property.clone(), cell.class.clone())).or_default() += usize::from(hit);
        }
    }
    let worst = agree.iter().min_by_key(|(_, &v)| v).expect("cells");
    verdict(
        *worst.1 >= 18,
        format!("{} cells, worst {}/{} agreement {}/20", agree.len(), worst.0 .0, worst.0 .1, worst.1),
    )
}

#[derive(Deserialize)]
struct GridFile {
    properties: Vec<String>,
    classes: Vec<String>,
    models: Vec<GridModel>,
}

#[derive(Deserialize)]
struct GridModel {
    label: String,
    rows: BTreeMap<String, String>,
    column_totals: Vec<usize>,
    total: String,
}

fn table_aggregation() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/usage_grids.json");
    let file: GridFile = serde_json::from_str(&fs::read_to_string(path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let props: Vec<&str> = file.properties.iter().map(String::as_str).collect();
    let classes: Vec<&str> = file.classes.iter().map(String::as_str).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for model in &file.models {
        let grid: Vec<Vec<bool>> = file
            .classes
            .iter()
            .map(|c| model.rows[c].chars().map(|ch| ch == '1').collect())
            .collect();
        let table = SignificanceTable::from_grid(&model.label, &props, &classes, &grid).map_err(|e| e.to_string())?;
        let usage = aggregate_usage(&table);
        let fractions: Vec<String> = usage.per_property.iter().map(|p| p.fraction.clone()).collect();
        let expected: Vec<String> = model.column_totals.iter().map(|k| format!("{k}/7")).collect();
        ok &= usage.total == model.total && fractions == expected;
        parts.push(format!("{} {} ({:.2}%)", model.label, usage.total, usage.percentage));
    }
    verdict(ok, parts.join(", "))
}

fn mean_accuracy_reproduction() -> Outcome {
    let rmn = mean_accuracy(&[82.29, 60.42, 33.33, 95.83, 13.19, 65.62]);
    let hse = mean_accuracy(&[66.32, 82.99, 60.76, 87.85, 81.25, 55.90]);
    verdict(
        rmn == Some(58.45) && hse == Some(72.51),
        format!("RMN {rmn:?}, HSE-7 {hse:?}"),
    )
}

fn geometry() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = seed::rng(seed::derive(41, case));
        let tilt: f64 = rng.random_range(0.0..44.0);
        let lean: f64 = rng.random_range(0.0..44.0);
        let (sx, sy) = (
            if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        );
        let iod = rng.random_range(20.0..80.0);
        let bridge = rng.random_range(10.0..40.0);
        let (cx, cy) = (rng.random_range(80.0..120.0), rng.random_range(80.0..120.0));
        let (t, l) = (tilt.to_radians(), lean.to_radians());
        let left = Point { x: cx - iod / 2.0 * t.cos(), y: cy - sy * iod / 2.0 * t.sin() };
        let right = Point { x: cx + iod / 2.0 * t.cos(), y: cy + sy * iod / 2.0 * t.sin() };
        let nasion = Point { x: cx, y: cy + 5.0 };
        let subnasale = Point { x: cx + sx * bridge * l.sin(), y: cy + 5.0 + bridge * l.cos() };
        let set = LandmarkSet::new(left, right, nasion, subnasale, None).map_err(|e| e.to_string())?;
        let eye = eye_level_deviation(&set).map_err(|e| e.to_string())?;
        let mid = midline_deviation(&set).map_err(|e| e.to_string())?;
        worst = worst.max((eye - tilt).abs()).max((mid - lean).abs());
    }
    verdict(worst <= 1e-9, format!("max |Δ| = {worst:.2e} degrees over 20 sets"))
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.file_name().is_some_and(|n| n != "run_manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).expect("read")))
        .collect()
}

fn propaudit(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_propaudit"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {}: {}", out.status, String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    propaudit(&["fixture", "--out", &dir("fixture"), "--seed", "5", "--effect", "1.0"])?;
    let data = dir("fixture/data.csv");
    let manifest = dir("fixture/manifest.json");
    let mut compared = 0;
    for (command, extra) in [
        ("audit", vec!["--data", data.as_str(), "--manifest", manifest.as_str(), "--permutations", "199"]),
        ("calibrate", vec!["--trials", "8", "--n", "200", "--permutations", "99"]),
    ] {
        let mut runs = Vec::new();
        for (run, jobs) in [("a", "1"), ("b", "1"), ("c", "8")] {
            let out = dir(&format!("{command}_{run}"));
            let mut args = vec![command, "--out", out.as_str(), "--seed", "9", "--jobs", jobs];
            args.extend(&extra);
            propaudit(&args)?;
            runs.push(outputs(Path::new(&out)));
        }
        if runs[0].is_empty() || runs.iter().any(|r| r != &runs[0]) {
            return Err(format!("{command} outputs differ between runs"));
        }
        compared += runs[0].len();
    }
    Ok(format!("{compared} files byte-identical across repeated runs and --jobs 1/8"))
}

fn main() {
    let trials = if std::env::var_os("PROPAUDIT_SMOKE").is_some() { 50 } else { 200 };
    let mut suite = Suite { failures: 0 };
    suite.check("hsic oracle equivalence", hsic_oracle);
    suite.check("cmi analytic accuracy", cmi_accuracy);

    let mut null = Err("null calibration did not run".to_string());
    suite.check("type-I calibration", || {
        null = calibrate(ScmKind::NullCommonCause, trials);
        rates(null.as_ref().map_err(Clone::clone)?, |r| (0.02..=0.10).contains(&r))
    });
    suite.check("p-value uniformity", || ks(null.as_ref().map_err(Clone::clone)?));
    suite.check("power", || rates(&calibrate(ScmKind::DirectDependence, trials)?, |r| r >= 0.8));

    suite.check("pipeline fidelity", pipeline_fidelity);
    suite.check("table aggregation", table_aggregation);
    suite.check("mean accuracy reproduction", mean_accuracy_reproduction);
    suite.check("geometry exactness", geometry);
    suite.check("determinism", determinism);

    if suite.failures > 0 {
        println!("{} criteria failed", suite.failures);
        std::process::exit(1);
    }
}
