use std::fmt;
use std::fs;
use std::path::Path;

use dps_core::backbone::{
    load_weights, store_weights, Backbone, BackboneError, BackboneId, BackboneSpec, WeightContainer,
};
use dps_core::bapps::{self, EvalError, SyntheticFamily};
use dps_core::image::{save_gray_png, Image};
use dps_core::metrics::{distance, Method, MetricConfig, MetricError};
use dps_core::probes::{self, CaseRecord, ProbeError, SuiteConfig};

use crate::{Command, MetricArgs, WeightArgs, EXIT_COMPUTE, EXIT_DATA, EXIT_USAGE};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Compute(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Compute(_) => EXIT_COMPUTE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Compute(m) => f.write_str(m),
        }
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::Layer { .. } => CliError::Compute(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::MissingBackbone(_) | MetricError::UnexpectedBackbone => {
                CliError::Usage(e.to_string())
            }
            MetricError::Backbone(inner) => inner.into(),
            MetricError::ImageSize { .. } | MetricError::BackboneMismatch { .. } => {
                CliError::Data(e.to_string())
            }
            MetricError::StackShape { .. } => CliError::Compute(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Metric { index, source } => match CliError::from(source) {
                CliError::Compute(m) => CliError::Compute(format!("sample {index}: {m}")),
                CliError::Data(m) => CliError::Data(format!("sample {index}: {m}")),
                CliError::Usage(m) => CliError::Usage(m),
            },
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        CliError::Compute(e.to_string())
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn read_image(path: &Path) -> Result<Image, CliError> {
    Image::load_png(path).map_err(|e| CliError::Data(e.to_string()))
}

/// Resolves weights for `id`: an explicit file, then synthetic weights, then
/// `<dir>/<id>.dpsw`.
fn load_backbone(id: BackboneId, args: &WeightArgs) -> Result<Backbone, CliError> {
    let spec = BackboneSpec::builtin(id);
    let container = if let Some(path) = &args.weights {
        load_weights(path)?
    } else if args.synthetic_weights {
        WeightContainer::synthetic(spec, args.seed)
    } else if let Some(dir) = &args.weights_dir {
        load_weights(dir.join(format!("{id}.dpsw")))?
    } else {
        return Err(CliError::Usage(format!(
            "no weights for `{id}`: pass --weights, --weights-dir (or DPS_WEIGHTS_DIR), or --synthetic-weights"
        )));
    };
    if container.backbone != id.as_str() {
        return Err(CliError::Data(format!(
            "weights are for `{}`, expected `{id}`",
            container.backbone
        )));
    }
    Ok(Backbone::new(spec, &container)?)
}

fn metric_config(args: &MetricArgs) -> Result<MetricConfig, CliError> {
    if !(args.nonspatial_weight.is_finite() && args.nonspatial_weight >= 0.0) {
        return Err(CliError::Usage(
            "--nonspatial-weight must be finite and non-negative".into(),
        ));
    }
    let mut config = match args.backbone {
        Some(b) => MetricConfig::deep(args.method, b, args.norm, args.unit_normalize),
        None => MetricConfig::pixelwise(args.norm),
    };
    config.method = args.method;
    config.nonspatial_weight = args.nonspatial_weight;
    if args.method == Method::Pixelwise && args.unit_normalize {
        return Err(CliError::Usage(
            "--unit-normalize applies only to deep methods".into(),
        ));
    }
    config.validate()?;
    Ok(config)
}

fn check_weights_unused(args: &WeightArgs) -> Result<(), CliError> {
    if args.weights.is_some() || args.synthetic_weights {
        return Err(CliError::Usage(
            "the pixelwise method takes no weights".into(),
        ));
    }
    Ok(())
}

fn backbone_for(config: &MetricConfig, weights: &WeightArgs) -> Result<Option<Backbone>, CliError> {
    match config.backbone {
        Some(id) => load_backbone(id, weights).map(Some),
        None => check_weights_unused(weights).map(|_| None),
    }
}

/// Six significant digits in positional notation; zero prints as `0.000000`.
pub fn format_distance(d: f64) -> String {
    if d == 0.0 || !d.is_finite() {
        return format!("{d:.6}");
    }
    let decimals = (5 - d.abs().log10().floor() as i64).max(0) as usize;
    format!("{d:.decimals$}")
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Compare {
            a,
            b,
            metric,
            weights,
        } => {
            let config = metric_config(&metric)?;
            let backbone = backbone_for(&config, &weights)?;
            let (a, b) = (read_image(&a)?, read_image(&b)?);
            let d = distance(&a, &b, &config, backbone.as_ref())?;
            println!("{}", format_distance(d.0));
            Ok(())
        }
        Command::Probe {
            method,
            backbone,
            norm,
            unit_normalize,
            per_category,
            out,
            weights,
        } => probe(
            method,
            backbone,
            norm,
            unit_normalize,
            per_category,
            &out,
            &weights,
        ),
        Command::Eval {
            manifest,
            metric,
            jnd_scoring,
            out,
            weights,
        } => {
            let config = metric_config(&metric)?;
            let backbone = backbone_for(&config, &weights)?;
            let (two_afc, jnd) = bapps::load_manifest(&manifest)?;
            if two_afc.is_empty() {
                return Err(CliError::Data(format!(
                    "{} has no 2AFC rows",
                    manifest.display()
                )));
            }
            let subdivisions = bapps::score_2afc(&two_afc, &config, backbone.as_ref())?;
            let jnd = if jnd.is_empty() {
                None
            } else {
                Some(bapps::score_jnd(
                    &jnd,
                    &config,
                    backbone.as_ref(),
                    jnd_scoring,
                )?)
            };
            let report = bapps::aggregate_report(&config.id(), subdivisions, jnd)?;
            let text = report.render();
            print!("{text}");
            if let Some(out) = out {
                create_dir(&out)?;
                write(&out.join("report.txt"), &text)?;
                write(&out.join("report.jsonl"), probes::to_json_lines([&report]))?;
            }
            Ok(())
        }
        Command::DumpFeatures {
            image,
            backbone,
            layer,
            out,
            weights,
        } => dump_features(&image, backbone, layer, &out, &weights),
        Command::SynthWeights {
            backbone,
            seed,
            out,
        } => {
            let container = WeightContainer::synthetic(BackboneSpec::builtin(backbone), seed);
            Ok(store_weights(&container, &out)?)
        }
        Command::GenSynthetic { count, seed, out } => {
            if count == 0 {
                return Err(CliError::Usage("--count must be positive".into()));
            }
            let manifest = bapps::gen_synthetic_2afc(seed, count, &out, &SyntheticFamily::ALL)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

fn probe(
    methods: Vec<Method>,
    backbones: Vec<BackboneId>,
    norm: dps_core::metrics::Norm,
    unit_normalize: bool,
    per_category: Option<usize>,
    out: &Path,
    weights: &WeightArgs,
) -> Result<(), CliError> {
    let methods = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods
    };
    let backbones = if backbones.is_empty() {
        BackboneId::ALL.to_vec()
    } else {
        backbones
    };
    let mut configs = Vec::new();
    for &m in &methods {
        if m == Method::Pixelwise {
            if unit_normalize {
                return Err(CliError::Usage(
                    "--unit-normalize applies only to deep methods".into(),
                ));
            }
            configs.push(MetricConfig::pixelwise(norm));
        } else {
            configs.extend(
                backbones
                    .iter()
                    .map(|&b| MetricConfig::deep(m, b, norm, unit_normalize)),
            );
        }
    }
    let needed: Vec<BackboneId> = BackboneId::ALL
        .into_iter()
        .filter(|id| configs.iter().any(|c| c.backbone == Some(*id)))
        .collect();
    if weights.weights.is_some() && needed.len() > 1 {
        return Err(CliError::Usage(
            "--weights needs a single --backbone; use --weights-dir".into(),
        ));
    }
    if needed.is_empty() {
        check_weights_unused(weights)?;
    }
    let suite_config = match per_category {
        Some(0) => return Err(CliError::Usage("--per-category must be positive".into())),
        Some(n) => SuiteConfig::reduced(n),
        None => SuiteConfig::default(),
    };
    let nets = needed
        .iter()
        .map(|&id| load_backbone(id, weights))
        .collect::<Result<Vec<_>, _>>()?;

    let cases = probes::build_suite(weights.seed, &suite_config);
    let report = probes::run_probe_suite(&cases, &configs, &nets)?;
    let claims = probes::directional_claims(&cases, &configs, &report, 24, 0.9);
    let table = report.table.render();

    create_dir(out)?;
    write(&out.join("table.txt"), &table)?;
    write(
        &out.join("cases.jsonl"),
        probes::to_json_lines(cases.iter().map(CaseRecord::from)),
    )?;
    write(
        &out.join("results.jsonl"),
        probes::to_json_lines(&report.results),
    )?;
    write(&out.join("claims.jsonl"), probes::to_json_lines(&claims))?;
    print!("{table}");
    Ok(())
}

fn dump_features(
    image: &Path,
    id: BackboneId,
    layer: usize,
    out: &Path,
    weights: &WeightArgs,
) -> Result<(), CliError> {
    let taps = BackboneSpec::builtin(id).taps.len();
    if layer == 0 || layer > taps {
        return Err(CliError::Usage(format!(
            "--layer must be in 1..={taps} for {id}"
        )));
    }
    let net = load_backbone(id, weights)?;
    let img = read_image(image)?;
    let stack = net.extract(&img)?;
    let (name, tensor) = stack.iter().nth(layer - 1).expect("tap count checked");
    create_dir(out)?;
    let (h, w) = (tensor.height(), tensor.width());
    for c in 0..tensor.channels() {
        let plane = tensor.channel(c);
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let values: Vec<f32> = if hi > lo {
            plane.iter().map(|&v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.5; plane.len()]
        };
        let path = out.join(format!("{name}_c{c:03}.png"));
        save_gray_png(&path, w, h, &values).map_err(|e| CliError::Data(e.to_string()))?;
    }
    println!("{} maps of {w}x{h} for {name}", tensor.channels());
    Ok(())
}
