mod args;
mod output;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use propaudit_core::dataset::{Dataset, PropertyKind};
use propaudit_core::symmetry::{load_pgm, read_landmarks, symmetry_record, write_symmetry_csv};
use propaudit_core::synth::{calibration_run, fixture_manifest, ks_uniform, CalibrationReport};
use propaudit_core::trend::{
    binary_group_summary, sliding_gaussian_trend, subpopulation_accuracy, trend_svg, violin_svg,
};
use propaudit_core::{
    aggregate_usage, export_table, generate_pipeline_fixture, generate_scm_dataset, load_dataset, run_audit,
    stratify, AuditConfig, AuditError, CiTest, ConditioningMode, ConsensusRule, Correction, ExportFormat, ScmKind,
    ScmSpec,
};
use serde::Serialize;
use serde_json::{Map, Value};

use args::{
    AccuracyArgs, AuditArgs, CalibrateArgs, Cli, Command, ConsensusArg, CorrectionArg, FixtureArgs, GlobalArgs, KindArg,
    ModeArg, PropertyKindArg, SymmetryArgs, TrendArgs,
};
use output::{write_atomic, write_json, RunManifest};

const EXIT_OTHER: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_INSUFFICIENT: u8 = 3;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn schema(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_SCHEMA,
            message: message.into(),
        }
    }

    fn insufficient(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INSUFFICIENT,
            message: message.into(),
        }
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        let code = if e.is_schema() {
            EXIT_SCHEMA
        } else if matches!(e, AuditError::InsufficientData(_)) {
            EXIT_INSUFFICIENT
        } else {
            EXIT_OTHER
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_OTHER,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let file = load_config(cli.global.config.as_deref())?;
    match &cli.command {
        Command::Audit(a) => cmd_audit(&cli.global, a, &file),
        Command::Accuracy(a) => cmd_accuracy(&cli.global, a),
        Command::Trend(a) => cmd_trend(&cli.global, a),
        Command::Symmetry(a) => cmd_symmetry(&cli.global, a),
        Command::Calibrate(a) => cmd_calibrate(&cli.global, a, &file),
        Command::Fixture(a) => cmd_fixture(&cli.global, a, &file),
    }
}

/// Keys accepted in `--config` besides the audit settings.
const EXTRA_CONFIG_KEYS: [&str; 2] = ["scm", "trials"];

fn load_config(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path)?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::schema("config must be a JSON object")),
        Err(e) => Err(CliError::schema(format!("config: {e}"))),
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn audit_config(global: &GlobalArgs, file: &Map<String, Value>) -> CliResult<AuditConfig> {
    let mut value = serde_json::to_value(AuditConfig::default()).expect("config serializes");
    let known: BTreeSet<String> = value.as_object().expect("object").keys().cloned().collect();
    let mut overrides = Map::new();
    for (k, v) in file {
        if known.contains(k) {
            overrides.insert(k.clone(), v.clone());
        } else if !EXTRA_CONFIG_KEYS.contains(&k.as_str()) {
            return Err(CliError::schema(format!("config: unknown key `{k}`")));
        }
    }
    merge(&mut value, &Value::Object(overrides));
    let mut config: AuditConfig =
        serde_json::from_value(value).map_err(|e| CliError::schema(format!("config: {e}")))?;
    if let Some(alpha) = global.alpha {
        config.alpha = alpha;
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(tests) = &global.tests {
        config.tests = tests.clone();
    }
    if let Some(c) = global.consensus {
        config.consensus = match c {
            ConsensusArg::Majority => ConsensusRule::Majority,
            ConsensusArg::Unanimous => ConsensusRule::Unanimous,
            ConsensusArg::Any => ConsensusRule::Any,
        };
    }
    if let Some(m) = global.mode {
        config.mode = match m {
            ModeArg::Stratify => ConditioningMode::Stratify,
            ModeArg::ConditionOnLabel => ConditioningMode::ConditionOnLabel,
        };
    }
    Ok(config)
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| {
        CliError::schema(format!(
            "missing {flag}\nusage: propaudit {command} --data <CSV> --manifest <JSON> [OPTIONS]"
        ))
    })
}

fn load_inputs(global: &GlobalArgs, command: &str, manifest: &mut RunManifest) -> CliResult<Dataset> {
    let data = required(&global.data, "--data", command)?;
    let manifest_path = required(&global.manifest, "--manifest", command)?;
    let dataset = load_dataset(data, manifest_path)?;
    manifest.add_input(data)?;
    manifest.add_input(manifest_path)?;
    Ok(dataset)
}

#[derive(Serialize)]
struct SkipEntry {
    property: String,
    class: String,
    reason: String,
}

fn cmd_audit(global: &GlobalArgs, args: &AuditArgs, file: &Map<String, Value>) -> CliResult<()> {
    let mut config = audit_config(global, file)?;
    if let Some(c) = args.correction {
        config.correction = match c {
            CorrectionArg::None => Correction::None,
            CorrectionArg::BenjaminiHochberg => Correction::BenjaminiHochberg,
        };
    }
    if let Some(b) = args.permutations {
        config.permutations = b;
    }
    if let Some(m) = args.min_stratum {
        config.min_stratum = m;
    }
    if let Some(label) = &args.label {
        config.run_label = label.clone();
    }
    config.validate()?;
    let mut run_manifest = RunManifest::new("audit", serde_json::to_value(&config).expect("serializes"), config.seed);
    let dataset = load_inputs(global, "audit", &mut run_manifest)?;
    let table = run_audit(&dataset, &config)?;

    let out = &global.out;
    let mut written = Vec::new();
    for (name, format) in [
        ("significance.csv", ExportFormat::Csv),
        ("significance.json", ExportFormat::Json),
        ("significance.txt", ExportFormat::TextGrid),
    ] {
        let path = out.join(name);
        write_atomic(&path, export_table(&table, format)?.as_bytes())?;
        written.push(path);
    }
    let skipped: Vec<SkipEntry> = table
        .skipped_cells()
        .into_iter()
        .map(|c| SkipEntry {
            property: c.property.clone(),
            class: c.class_name.clone(),
            reason: c.skipped.clone().unwrap_or_default(),
        })
        .collect();
    let skip_path = out.join("skipped.json");
    write_json(&skip_path, &skipped)?;
    written.push(skip_path);
    let usage = aggregate_usage(&table);
    let usage_path = out.join("usage.json");
    write_json(&usage_path, &usage)?;
    written.push(usage_path);
    run_manifest.write(out, &written)?;

    print!("{}", export_table(&table, ExportFormat::TextGrid)?);
    println!("{}: {} ({:.2}%)", usage.run_label, usage.total, usage.percentage);
    if table.cell_total == 0 {
        return Err(CliError::insufficient("no cell had enough data to test"));
    }
    Ok(())
}

fn cmd_accuracy(global: &GlobalArgs, args: &AccuracyArgs) -> CliResult<()> {
    let mut run_manifest = RunManifest::new("accuracy", serde_json::json!({ "group_by": args.group_by }), 0);
    let dataset = load_inputs(global, "accuracy", &mut run_manifest)?;
    let groups: Vec<&str> = args.group_by.iter().map(String::as_str).collect();
    let table = subpopulation_accuracy(&dataset, &groups)?;
    let csv_path = global.out.join("accuracy.csv");
    let txt_path = global.out.join("accuracy.txt");
    write_atomic(&csv_path, table.to_csv()?.as_bytes())?;
    write_atomic(&txt_path, table.to_text().as_bytes())?;
    run_manifest.write(&global.out, &[csv_path, txt_path])?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_trend(global: &GlobalArgs, args: &TrendArgs) -> CliResult<()> {
    let config = serde_json::json!({
        "property": args.property,
        "class": args.class,
        "window_frac": args.window_frac,
        "stride_frac": args.stride_frac,
    });
    let mut run_manifest = RunManifest::new("trend", config, 0);
    let dataset = load_inputs(global, "trend", &mut run_manifest)?;
    let specs: Vec<_> = match &args.property {
        Some(p) => vec![dataset
            .property_spec(p)
            .ok_or_else(|| CliError::schema(format!("unknown property `{p}`")))?
            .clone()],
        None => dataset.property_specs().to_vec(),
    };
    let classes: Vec<usize> = match &args.class {
        Some(c) => vec![dataset
            .class_index(c)
            .ok_or_else(|| CliError::schema(format!("unknown class `{c}`")))?],
        None => (0..dataset.num_classes()).collect(),
    };
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    for spec in &specs {
        for &c in &classes {
            let class = &dataset.class_names()[c];
            let result = stratify(&dataset, c, 1).and_then(|subset| {
                let prop = subset.property(&spec.abbreviation).expect("manifest property");
                let logit = subset.logits(c);
                let stem = format!("{}_{}", spec.abbreviation, class);
                let mut files = Vec::new();
                match spec.kind {
                    PropertyKind::Scalar => {
                        let curve = sliding_gaussian_trend(prop, logit, args.window_frac, args.stride_frac)?;
                        files.push((format!("trend_{stem}.csv"), curve.to_csv()?));
                        if global.svg {
                            files.push((format!("trend_{stem}.svg"), trend_svg(&curve)));
                        }
                    }
                    PropertyKind::Binary => {
                        let groups = binary_group_summary(prop, logit)?;
                        let json = serde_json::to_string_pretty(&[&groups.0, &groups.1])? + "\n";
                        files.push((format!("groups_{stem}.json"), json));
                        if global.svg {
                            files.push((format!("groups_{stem}.svg"), violin_svg(&groups)));
                        }
                    }
                }
                Ok(files)
            });
            match result {
                Ok(files) => {
                    for (name, text) in files {
                        let path = global.out.join(name);
                        write_atomic(&path, text.as_bytes())?;
                        written.push(path);
                    }
                }
                Err(AuditError::InsufficientData(reason)) => skipped.push(SkipEntry {
                    property: spec.abbreviation.clone(),
                    class: class.clone(),
                    reason,
                }),
                Err(e) => return Err(e.into()),
            }
        }
    }
    for s in &skipped {
        eprintln!("skipped {} / {}: {}", s.property, s.class, s.reason);
    }
    if !skipped.is_empty() {
        let path = global.out.join("skipped.json");
        write_json(&path, &skipped)?;
        written.push(path);
    }
    let produced = written.iter().any(|p| !p.ends_with("skipped.json"));
    run_manifest.write(&global.out, &written)?;
    if !produced {
        return Err(CliError::insufficient("no trend could be computed"));
    }
    Ok(())
}

fn cmd_symmetry(global: &GlobalArgs, args: &SymmetryArgs) -> CliResult<()> {
    let config = serde_json::json!({ "images": args.images.as_ref().map(|p| p.display().to_string()) });
    let mut run_manifest = RunManifest::new("symmetry", config, 0);
    let rows = read_landmarks(fs::File::open(&args.landmarks)?)?;
    run_manifest.add_input(&args.landmarks)?;
    let mut records = Vec::with_capacity(rows.len());
    for row in &rows {
        let image_path = args
            .images
            .as_ref()
            .map(|dir| dir.join(format!("{}.pgm", row.sample_id)))
            .filter(|p| p.is_file());
        let image = match &image_path {
            Some(p) => {
                run_manifest.add_input(p)?;
                Some(load_pgm(p)?)
            }
            None => None,
        };
        records.push(symmetry_record(row, image.as_ref())?);
    }
    let mut bytes = Vec::new();
    write_symmetry_csv(&records, &mut bytes)?;
    let path = global.out.join("symmetry.csv");
    write_atomic(&path, &bytes)?;
    run_manifest.write(&global.out, &[path])?;
    println!("{} records", records.len());
    Ok(())
}

fn property_kind(arg: PropertyKindArg) -> PropertyKind {
    match arg {
        PropertyKindArg::Scalar => PropertyKind::Scalar,
        PropertyKindArg::Binary => PropertyKind::Binary,
    }
}

struct ScmFlags {
    kind: KindArg,
    n: Option<usize>,
    classes: Option<usize>,
    effect: Option<f64>,
    noise: Option<f64>,
    property_kind: Option<PropertyKindArg>,
}

fn scm_spec(flags: ScmFlags, seed: u64, file: &Map<String, Value>) -> CliResult<ScmSpec> {
    let kind = match flags.kind {
        KindArg::Null => ScmKind::NullCommonCause,
        KindArg::Direct => ScmKind::DirectDependence,
        KindArg::Pipeline => ScmKind::PipelineFixture,
    };
    let default_n = if kind == ScmKind::PipelineFixture { 700 } else { 500 };
    let mut value = serde_json::to_value(ScmSpec {
        n: default_n,
        ..ScmSpec::default()
    })
    .expect("spec serializes");
    if let Some(over) = file.get("scm") {
        merge(&mut value, over);
    }
    let mut spec: ScmSpec = serde_json::from_value(value).map_err(|e| CliError::schema(format!("config scm: {e}")))?;
    spec.kind = kind;
    spec.seed = seed;
    if let Some(n) = flags.n {
        spec.n = n;
    }
    if let Some(c) = flags.classes {
        spec.classes = c;
    }
    if let Some(e) = flags.effect {
        spec.effect_size = e;
    }
    if let Some(s) = flags.noise {
        spec.noise_std = s;
    }
    if let Some(k) = flags.property_kind {
        spec.property_kind = property_kind(k);
    }
    spec.validate().map_err(|e| CliError::schema(e.to_string()))?;
    Ok(spec)
}

#[derive(Serialize)]
struct Uniformity {
    test: String,
    ks_statistic: f64,
    ks_p_value: f64,
}

#[derive(Serialize)]
struct CalibrationOutput {
    report: CalibrationReport,
    uniformity: Vec<Uniformity>,
}

fn cmd_calibrate(global: &GlobalArgs, args: &CalibrateArgs, file: &Map<String, Value>) -> CliResult<()> {
    if args.kind == KindArg::Pipeline {
        return Err(CliError::schema("calibration runs on the null or direct kind"));
    }
    let mut config = audit_config(global, file)?;
    if global.alpha.is_none() && !file.contains_key("alpha") {
        config.alpha = 0.05;
    }
    if let Some(b) = args.permutations {
        config.permutations = b;
    }
    config.validate()?;
    let trials = match args.trials {
        Some(t) => t,
        None => match file.get("trials") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| CliError::schema("config: trials must be a non-negative integer"))?
                as usize,
            None => 200,
        },
    };
    if trials < 50 {
        eprintln!("warning: {trials} trials is below the recommended minimum of 50");
    }
    let spec = scm_spec(
        ScmFlags {
            kind: args.kind,
            n: args.n,
            classes: None,
            effect: args.effect,
            noise: args.noise,
            property_kind: args.property_kind,
        },
        config.seed,
        file,
    )?;
    let tests: Vec<Box<dyn CiTest>> = config.tests.iter().map(|&id| config.build_test(id)).collect();
    let refs: Vec<&dyn CiTest> = tests.iter().map(|t| t.as_ref()).collect();
    let report = calibration_run(&refs, &spec, trials, config.alpha)?;
    let uniformity = report
        .results
        .iter()
        .map(|r| {
            let (d, p) = ks_uniform(&r.p_values);
            Uniformity {
                test: r.test.clone(),
                ks_statistic: d,
                ks_p_value: p,
            }
        })
        .collect();
    for r in &report.results {
        println!(
            "{}: rate {:.4} [{:.4}, {:.4}] over {} trials ({} failed)",
            r.test,
            r.rate,
            r.ci_low,
            r.ci_high,
            r.completed,
            r.failures.len()
        );
    }
    let resolved = serde_json::json!({ "audit": config, "scm": spec, "trials": trials });
    let run_manifest = RunManifest::new("calibrate", resolved, config.seed);
    let path = global.out.join("calibration.json");
    write_json(&path, &CalibrationOutput { report, uniformity })?;
    run_manifest.write(&global.out, &[path])?;
    Ok(())
}

fn cmd_fixture(global: &GlobalArgs, args: &FixtureArgs, file: &Map<String, Value>) -> CliResult<()> {
    let seed = global
        .seed
        .or_else(|| file.get("seed").and_then(Value::as_u64))
        .unwrap_or(0);
    let spec = scm_spec(
        ScmFlags {
            kind: args.kind,
            n: args.n,
            classes: args.classes,
            effect: args.effect,
            noise: args.noise,
            property_kind: args.property_kind,
        },
        seed,
        file,
    )?;
    let out = &global.out;
    let mut written = Vec::new();
    let truth = if spec.kind == ScmKind::PipelineFixture {
        let (dataset, truth) = generate_pipeline_fixture(&spec)?;
        let mut bytes = Vec::new();
        dataset.write_csv(&mut bytes)?;
        let data_path = out.join("data.csv");
        write_atomic(&data_path, &bytes)?;
        let manifest_path = out.join("manifest.json");
        write_json(&manifest_path, &fixture_manifest(&spec))?;
        written.extend([data_path, manifest_path]);
        truth
    } else {
        let sample = generate_scm_dataset(&spec)?;
        let mut text = String::from("x,y,z\n");
        for i in 0..spec.n {
            text.push_str(&format!("{},{},{}\n", sample.x[i], sample.y[i], sample.z[(i, 0)]));
        }
        let bytes = text.into_bytes();
        let path = out.join("scm.csv");
        write_atomic(&path, &bytes)?;
        written.push(path);
        sample.truth
    };
    let truth_path = out.join("ground_truth.json");
    write_json(&truth_path, &truth)?;
    written.push(truth_path);
    RunManifest::new("fixture", serde_json::to_value(&spec).expect("serializes"), seed).write(out, &written)?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}
