use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use regprompt::fusion::{self, LibraryEntry, PipelineConfig, ReferenceLibrary, Strategy};
use regprompt::metrics::{evaluate_case, write_csv};
use regprompt::phantom::generate_case;
use regprompt::prompts::{save_prompts, StructureId};
use regprompt::registration::{register, RegistrationConfig};
use regprompt::segmenter::Segmenter;
use regprompt::transform::invert;
use regprompt::volume::{
    load_volume, preprocess, resample_through, save_dense_field, save_volume, Interpolation, Volume, VolumeFormat,
};
use serde_json::json;

use crate::args::{EvaluateArgs, PhantomArgs, PreprocessArgs, RegisterArgs, SegmentArgs};
use crate::config::{read_json, RunConfig};
use crate::error::CliError;

fn load(path: &Path) -> Result<Volume<f32>, CliError> {
    load_volume(path, VolumeFormat::from_path(path)).map_err(|e| CliError::data(path, e))
}

fn save(v: &Volume<f32>, path: &Path) -> Result<(), CliError> {
    save_volume(v, path, VolumeFormat::from_path(path)).map_err(|e| CliError::data(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(path, e))
}

fn registration_config(flag: Option<&Path>, cfg: &RunConfig) -> Result<RegistrationConfig, CliError> {
    let reg = match flag {
        Some(p) => read_json::<RegistrationConfig>(p)?,
        None => cfg.registration.clone(),
    };
    reg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(reg)
}

fn mask_path(dir: &Path, s: &StructureId) -> PathBuf {
    dir.join(format!("{s}.nii"))
}

pub fn phantom(args: &PhantomArgs, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let case = generate_case(&cfg.phantom, seed, args.references as usize, &cfg.bounds)
        .map_err(|e| CliError::Usage(format!("phantom spec: {e}")))?;
    let dir = &args.out_dir;
    let gt = dir.join("gt");
    create_dir(&gt)?;
    save(&case.new_image.image, &dir.join("new.nii"))?;
    let prompts = dir.join("new.prompts.json");
    save_prompts(&case.new_image.prompts, &prompts).map_err(|e| CliError::data(&prompts, e))?;
    for (s, m) in &case.new_image.masks {
        save(m, &mask_path(&gt, s))?;
    }
    let lib = ReferenceLibrary::new(
        case.references
            .iter()
            .enumerate()
            .map(|(i, r)| LibraryEntry::from_phantom(format!("ref-{i}"), r, true))
            .collect(),
    );
    let manifest = lib.save(dir).map_err(|e| CliError::Data(e.to_string()))?;
    let meta = json!({
        "seed": seed,
        "references": args.references,
        "spec": cfg.phantom,
        "bounds": cfg.bounds,
    });
    write_text(
        &dir.join("case.json"),
        &serde_json::to_string_pretty(&meta).expect("plain json"),
    )?;
    log::info!(
        "wrote phantom case with {} references to {}",
        lib.len(),
        manifest.display()
    );
    Ok(())
}

pub fn preprocess_cmd(args: &PreprocessArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let dims = args.dims.unwrap_or(cfg.preprocess.dims);
    let [lo, hi] = args.clip.unwrap_or(cfg.preprocess.clip);
    let v = load(&args.input)?;
    let out = preprocess(&v, dims, (lo, hi)).map_err(|e| CliError::Usage(e.to_string()))?;
    save(&out, &args.output)
}

pub fn register_cmd(args: &RegisterArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let reg_cfg = registration_config(args.registration.as_deref(), cfg)?;
    let fixed = load(&args.fixed)?;
    let moving = load(&args.moving)?;
    let result = register(&fixed, &moving, &reg_cfg).map_err(|e| CliError::Data(e.to_string()))?;
    result
        .transform
        .save(&args.transform)
        .map_err(|e| CliError::data(&args.transform, e))?;
    if let Some(path) = &args.resampled {
        save(
            &resample_through(&moving, fixed.grid(), &result.transform, Interpolation::Trilinear),
            path,
        )?;
    }
    let mut inverse = None;
    if let Some(path) = &args.inverse {
        let inv = invert(
            &result.transform,
            moving.grid(),
            cfg.inverse_tol_mm,
            cfg.inverse_max_iter,
        )
        .map_err(|e| CliError::Data(format!("inverse: {e}")))?;
        save_dense_field(&inv.field, path).map_err(|e| CliError::data(path, e))?;
        inverse = Some(inv.stats);
    }
    let summary = json!({
        "final_cost": result.final_cost,
        "levels": result.levels,
        "inverse": inverse,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain json"));
    Ok(())
}

pub fn segment(args: &SegmentArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let pipeline = PipelineConfig {
        registration: registration_config(args.registration.as_deref(), cfg)?,
        policy: cfg.policy.clone(),
        inverse_tol_mm: cfg.inverse_tol_mm,
        inverse_max_iter: cfg.inverse_max_iter,
        structures: args
            .structures
            .as_ref()
            .map(|v| v.iter().map(|s| StructureId::new(s.trim())).collect()),
    };
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        return Err(CliError::Usage(format!(
            "--timeout must be positive, got {}",
            args.timeout
        )));
    }
    let new = load(&args.new_image)?;
    let lib = ReferenceLibrary::load(&args.library).map_err(|e| CliError::Data(e.to_string()))?;
    let mut backend = if args.strategy.needs_segmenter() {
        Some(
            args.segmenter
                .build(Duration::from_secs_f64(args.timeout))
                .map_err(|e| CliError::Backend(e.to_string()))?,
        )
    } else {
        None
    };
    let seg = backend.as_mut().map(|b| &mut **b as &mut dyn Segmenter);
    let result = fusion::run(args.strategy, &new, &lib, &pipeline, seg).map_err(|e| match e {
        fusion::FusionError::MissingMasks(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    })?;
    drop(backend);

    create_dir(&args.out_dir)?;
    for (s, m) in &result.fused {
        save(m, &mask_path(&args.out_dir, s))?;
    }
    write_text(&args.out_dir.join("provenance.json"), &result.provenance_json())?;
    for c in result.dropped() {
        log::warn!(
            "{} / {}: dropped ({})",
            c.source,
            c.structure,
            match &c.status {
                fusion::CandidateStatus::Dropped(r) => r.to_string(),
                fusion::CandidateStatus::Ok => unreachable!(),
            }
        );
    }
    for (s, m) in &result.fused {
        log::info!("{s}: {} voxels from {} votes", m.count_nonzero(), result.votes(s));
    }
    if result.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::StructureFailure(
            result.failures.iter().map(|f| f.structure.to_string()).collect(),
        ))
    }
}

fn masks_in(dir: &Path) -> Result<BTreeMap<StructureId, Volume<f32>>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::data(dir, e))? {
        let path = entry.map_err(|e| CliError::data(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("nii") {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.insert(StructureId::new(name), load(&path)?.binarized());
        }
    }
    Ok(out)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let gt = masks_in(&args.gt)?;
    if gt.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no ground-truth masks (*.nii)",
            args.gt.display()
        )));
    }
    let pred = masks_in(&args.pred)?;
    let prov = args.pred.join("provenance.json");
    let strategy = match fs::read_to_string(&prov) {
        Ok(text) => serde_json::from_str::<serde_json::Value>(&text).map_err(|e| CliError::data(&prov, e))?["strategy"]
            .as_str()
            .and_then(|s| s.parse::<Strategy>().ok())
            .map(|s| s.to_string())
            .unwrap_or_else(|| "unknown".into()),
        Err(_) => "unknown".into(),
    };
    let report = evaluate_case(&args.case_id, &strategy, &pred, &gt).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&args.out, &serde_json::to_string_pretty(&report).expect("plain json"))?;
    if let Some(path) = &args.csv {
        let file = fs::File::create(path).map_err(|e| CliError::data(path, e))?;
        write_csv(std::slice::from_ref(&report), file).map_err(|e| CliError::data(path, e))?;
    }
    for (s, m) in &report.structures {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{s}\tdice {}\tvoe {}\trmsd {} mm",
            fmt(m.dice),
            fmt(m.voe),
            fmt(m.rmsd_mm)
        );
    }
    Ok(())
}
