use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use toothseg::field::{descent_targets, EnergyField};
use toothseg::geometry::{
    average_dentitions, build_penalty_matrix, export_penalty_matrix, export_penalty_matrix_json,
    import_penalty_matrix, load_centroids, CentroidTable, PenaltyMatrix, QuadrantPenalty,
};
use toothseg::io::{read_volume, write_volume, VolumeFormat};
use toothseg::loss::{direction_loss, edt_loss, segmentation_loss, total_loss, LossParts, LossWeights};
use toothseg::metrics::evaluate;
use toothseg::phantom::{corrupt, generate, PhantomSpec};
use toothseg::watershed::{majority_vote, run_pipeline, WatershedConfig};
use toothseg::{InstanceMap, PayloadKind, Volume};

use crate::{
    BuildArgs, Command, DemoArgs, EvaluateArgs, Format, GeopriorCmd, LossArgs, LossCmd, PhantomArgs, PhantomCmd,
    PipelineCmd, TargetsArgs, TargetsCmd, WatershedArgs, WatershedCmd, WatershedFlags,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Geoprior(GeopriorCmd::Build(a)) => geoprior_build(a),
        Command::Targets(TargetsCmd::Generate(a)) => targets_generate(a),
        Command::Loss(LossCmd::Eval(a)) => loss_eval(a),
        Command::Watershed(WatershedCmd::Run(a)) => watershed_run(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Phantom(PhantomCmd::Generate(a)) => phantom_generate(a),
        Command::Pipeline(PipelineCmd::Demo(a)) => pipeline_demo(a),
    }
}

/// Fails early on output paths whose format cannot be inferred.
fn check_outputs<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    for p in paths {
        VolumeFormat::from_path(p)?;
    }
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn geoprior_build(a: BuildArgs) -> Result<()> {
    let table = match (&a.male, &a.female) {
        (None, None) => CentroidTable::bundled_average(),
        (m, f) => {
            let male = m.as_ref().map(load_centroids).transpose()?.unwrap_or_else(CentroidTable::bundled_male);
            let female = f.as_ref().map(load_centroids).transpose()?.unwrap_or_else(CentroidTable::bundled_female);
            average_dentitions(&male, &female)?
        }
    };
    let pm = build_penalty_matrix(&table, &QuadrantPenalty::default(), a.background_penalty)?;
    log::info!("tooth block maximum before scaling: {}", pm.tooth_block_max);
    if is_json(&a.out) {
        export_penalty_matrix_json(&pm, &a.out)?;
    } else {
        export_penalty_matrix(&pm, &a.out)?;
    }
    Ok(())
}

fn instances_of(labels: &Volume, instance_ids: bool) -> Result<InstanceMap> {
    Ok(if instance_ids { InstanceMap::from_instance_labels(labels)? } else { InstanceMap::from_class_labels(labels)? })
}

fn targets_generate(a: TargetsArgs) -> Result<()> {
    check_outputs([&a.out_energy, &a.out_dir])?;
    let labels = read_volume(&a.labels, PayloadKind::Labels)?;
    let (energy, dirs) = descent_targets(&instances_of(&labels, a.instance_labels)?);
    write_volume(&energy.energy, &a.out_energy)?;
    write_volume(&dirs.directions, &a.out_dir)?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<PenaltyMatrix> {
    if is_json(path) {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let pm: PenaltyMatrix = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        pm.validate()?;
        Ok(pm)
    } else {
        Ok(import_penalty_matrix(path)?)
    }
}

fn loss_eval(a: LossArgs) -> Result<()> {
    let mut w = LossWeights {
        lambda_edt: a.lambda_edt,
        lambda_seg: a.lambda_seg,
        lambda_dir: a.lambda_dir,
        seg_geo_weight: a.seg_geo_weight,
        seg_wce_weight: a.seg_wce_weight,
        ..Default::default()
    };
    w.validate()?;
    let pm = read_matrix(&a.matrix)?;
    let pred = read_volume(&a.pred, PayloadKind::ProbStack)?;
    let gt = read_volume(&a.gt, PayloadKind::Labels)?;
    w.class_frequencies = LossWeights::with_frequencies_from(&gt)?.class_frequencies;
    let seg = segmentation_loss(&pred, &gt, &pm, &w)?;

    let needs_targets = (a.pred_energy.is_some() && a.gt_energy.is_none()) || (a.pred_dir.is_some() && a.gt_dir.is_none());
    let targets = needs_targets.then(|| InstanceMap::from_class_labels(&gt).map(|m| descent_targets(&m))).transpose()?;

    let edt = match &a.pred_energy {
        Some(p) => {
            let pe = read_volume(p, PayloadKind::Scalar)?;
            let ge = match &a.gt_energy {
                Some(g) => read_volume(g, PayloadKind::Scalar)?,
                None => targets.as_ref().expect("targets derived").0.energy.clone(),
            };
            Some(edt_loss(&pe, &ge)?)
        }
        None => None,
    };
    let dir = match &a.pred_dir {
        Some(p) => {
            let pd = read_volume(p, PayloadKind::Vector3)?;
            let gd = match &a.gt_dir {
                Some(g) => read_volume(g, PayloadKind::Vector3)?,
                None => targets.as_ref().expect("targets derived").1.directions.clone(),
            };
            Some(direction_loss(&pd, &gd, &gt, a.dir_mean)?)
        }
        None => None,
    };
    let total = total_loss(LossParts { edt: edt.unwrap_or(0.0), seg: seg.seg, dir: dir.unwrap_or(0.0) }, &w)?;
    let out = json!({
        "geo_wdl": seg.geo_wdl,
        "wce": seg.wce,
        "seg": seg.seg,
        "edt": edt,
        "dir": dir,
        "total": total,
    });
    emit(&serde_json::to_string_pretty(&out)?, a.out.as_deref())
}

fn watershed_config(f: &WatershedFlags) -> Result<WatershedConfig> {
    let cfg = WatershedConfig {
        beta: f.beta,
        min_seed_voxels: f.min_seed_voxels as usize,
        min_instance_voxels: f.min_instance_voxels as usize,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Label volume if the file holds one, otherwise a probability stack.
fn read_segmentation(path: &Path) -> Result<Volume> {
    match read_volume(path, PayloadKind::Labels) {
        Err(toothseg::Error::PayloadMismatch { .. }) => Ok(read_volume(path, PayloadKind::ProbStack)?),
        other => Ok(other?),
    }
}

fn watershed_run(a: WatershedArgs) -> Result<()> {
    let cfg = watershed_config(&a.flags)?;
    check_outputs(std::iter::once(&a.out).chain(&a.out_classes))?;
    let energy = EnergyField::prediction(read_volume(&a.energy, PayloadKind::Scalar)?)?;
    let seg = read_segmentation(&a.seg)?;
    let inst = run_pipeline(&energy, &seg, &cfg)?;
    write_volume(inst.labels(), &a.out)?;
    if let Some(p) = &a.out_classes {
        write_volume(&inst.class_labels()?, p)?;
    }
    let records: Vec<_> = inst
        .records()
        .iter()
        .map(|r| {
            json!({
                "id": r.instance_id,
                "voxels": r.voxel_count,
                "class": r.assigned_class,
                "seed_peak_energy": r.seed_peak_energy,
            })
        })
        .collect();
    let report = json!({ "count": records.len(), "instances": records });
    emit(&serde_json::to_string_pretty(&report)?, a.report.as_deref())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let pred = read_volume(&a.pred, PayloadKind::Labels)?;
    let gt = read_volume(&a.gt, PayloadKind::Labels)?;
    // Instance classes come from a vote against the matching label volume.
    let load = |p: &Option<PathBuf>, classes: &Volume| -> Result<Option<InstanceMap>> {
        match p {
            Some(p) => {
                let ids = read_volume(p, PayloadKind::Labels)?;
                Ok(Some(majority_vote(&InstanceMap::from_instance_labels(&ids)?, classes)?))
            }
            None => Ok(None),
        }
    };
    let pi = load(&a.pred_inst, &pred)?;
    let gi = load(&a.gt_inst, &gt)?;
    let report = evaluate(&pred, &gt, pi.as_ref(), gi.as_ref())?;
    emit(&report.to_json()?, a.out.as_deref())
}

fn load_spec(arg: &str, sigma: Option<f64>) -> Result<PhantomSpec> {
    let mut spec = if arg == "default" {
        PhantomSpec::default()
    } else {
        let text = fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing phantom spec {arg}"))?
    };
    if let Some(s) = sigma {
        spec.noise_sigma = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn phantom_generate(a: PhantomArgs) -> Result<()> {
    let spec = load_spec(&a.spec, a.sigma)?;
    let ext = match a.format {
        Format::NiiGz => "nii.gz",
        Format::Nii => "nii",
        Format::Raw => "json",
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let ph = generate(&spec)?;
    let (energy, dirs) = ph.targets();
    let mut outputs: Vec<(&str, &Volume)> = vec![
        ("gt_labels", &ph.gt_labels),
        ("gt_instances", ph.gt_instances.labels()),
        ("gt_energy", &energy.energy),
        ("gt_dir", &dirs.directions),
    ];
    let corrupted = (spec.noise_sigma > 0.0)
        .then(|| corrupt(&ph, spec.noise_sigma, a.noise_seed.unwrap_or(spec.jitter_seed)))
        .transpose()?;
    if let Some(c) = &corrupted {
        outputs.extend([("pred_probs", &c.pred_probs), ("pred_energy", &c.pred_energy.energy), ("pred_dir", &c.pred_dir)]);
    }
    let mut written = Vec::new();
    for (name, v) in outputs {
        let p = a.out_dir.join(format!("{name}.{ext}"));
        write_volume(v, &p)?;
        written.push(p.display().to_string());
    }
    let spec_path = a.out_dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(&spec)?).with_context(|| format!("writing {}", spec_path.display()))?;
    let teeth_path = a.out_dir.join("teeth.json");
    fs::write(&teeth_path, serde_json::to_string_pretty(&ph.teeth)?)
        .with_context(|| format!("writing {}", teeth_path.display()))?;
    written.extend([spec_path.display().to_string(), teeth_path.display().to_string()]);
    emit(&serde_json::to_string_pretty(&json!({ "files": written }))?, None)
}

fn pipeline_demo(a: DemoArgs) -> Result<()> {
    let cfg = watershed_config(&a.flags)?;
    let spec = load_spec(&a.spec, a.sigma)?;
    let ph = generate(&spec)?;
    let c = corrupt(&ph, spec.noise_sigma, a.noise_seed.unwrap_or(spec.jitter_seed))?;
    let inst = run_pipeline(&c.pred_energy, &c.pred_probs, &cfg)?;
    log::info!("{} instances for {} teeth", inst.count(), ph.gt_instances.count());
    let report = evaluate(&inst.class_labels()?, &ph.gt_labels, Some(&inst), Some(&ph.gt_instances))?;
    emit(&report.to_json()?, a.out.as_deref())
}
