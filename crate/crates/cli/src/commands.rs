use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde_json::{json, Value};
use voidface_core::distribution::{plan_distribution, InstitutionId};
use voidface_core::hygiene::BufferRegistry;
use voidface_core::metrics::{
    adjacent_correlation, brute_force_log_probability, npcr, npcr_campaign, shannon_entropy,
    uniform_npcr_stderr, Direction, MetricReport, UNIFORM_NPCR,
};
use voidface_core::orchestrator::{
    dispatch_and_reconstruct, train_round, FairnessLedger, NodeProfile, RoundConfig, RoundWorkload,
    TrafficLog, TrainerKind, TrainingRound,
};
use voidface_core::patch::{AuditLog, IngestionSession, LandmarkSet};
use voidface_core::rng::{production_rng, seeded};
use voidface_core::share_file;
use voidface_core::simnet::{single_link_sweep, Scenario, Simulation};
use voidface_core::vault::{Vault, VaultError};
use voidface_core::vss::share_patches;
use voidface_core::{Exec, GridShape, PatchImage, PatchKind, ShareGrid, ShareRole, SubjectId};

use crate::config::CliConfig;
use crate::exit::{CliError, Exit};
use crate::store::{self, DirInstitutions};

/// Machine-readable report plus its human rendering.
pub struct Outcome {
    pub report: Value,
    pub lines: Vec<String>,
    /// Seed actually used when it differs from the configured one.
    pub seed: Option<u64>,
}

fn rng(cfg: &CliConfig) -> Box<dyn RngCore> {
    match cfg.seed {
        Some(s) => Box::new(seeded(s)),
        None => Box::new(production_rng()),
    }
}

fn open_vault(cfg: &CliConfig) -> Result<Vault, CliError> {
    Ok(Vault::open(&cfg.vault_dir)?)
}

fn subject_dir(cfg: &CliConfig, subject: SubjectId) -> PathBuf {
    cfg.share_dir.join(subject.to_string())
}

fn read_grids(files: &[PathBuf]) -> Result<Vec<ShareGrid>, CliError> {
    files
        .iter()
        .map(|f| {
            share_file::read_file(f)
                .map_err(|e| CliError::new(Exit::InvalidInput, format!("{}: {e}", f.display())))
        })
        .collect()
}

pub fn prepare(
    cfg: &CliConfig,
    image: &Path,
    landmarks: &Path,
    subject: Option<SubjectId>,
    allow: &[String],
) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(landmarks).map_err(|e| {
        CliError::new(
            Exit::InvalidInput,
            format!("landmarks {}: {e}", landmarks.display()),
        )
    })?;
    let landmarks = LandmarkSet::from_json(&text)?;
    if !image.is_file() {
        return Err(CliError::new(
            Exit::NotFound,
            format!("image {} not found", image.display()),
        ));
    }
    let mut rng = rng(cfg);
    let subject = subject.unwrap_or_else(|| {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        SubjectId(uuid::Builder::from_random_bytes(b).into_uuid())
    });
    let mut vault = open_vault(cfg)?;
    if vault.record(subject).is_some_and(|r| r.active) {
        return Err(CliError::new(
            Exit::Conflict,
            format!("subject {subject} is already registered"),
        ));
    }

    let registry = BufferRegistry::new();
    let audit = AuditLog::with_sink(cfg.vault_dir.join("ingest_audit.jsonl"));
    let mut session = IngestionSession::load(subject, image, &registry, audit)?;
    let bundle = session.extract(&landmarks, cfg.patch_size)?;
    let destroyed = session.destroy_original()?;
    let (auth, private) = share_patches(subject, &bundle.patches, &mut *rng)
        .map_err(|e| CliError::new(Exit::Internal, e.to_string()))?;
    drop(bundle);

    let dir = subject_dir(cfg, subject);
    store::erase_subject_dir(&dir)?;
    fs::create_dir_all(&dir)?;
    let mut files = vec![cfg.vault_dir.join("as").join(format!("{subject}.share"))];
    for ps in &private {
        let path = dir.join(store::file_name(ps));
        share_file::write_file(&path, ps)?;
        files.push(path);
    }
    vault.register_subject(subject, auth, None)?;
    for requester in allow {
        vault.grant_requester(subject, requester)?;
    }

    let files: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    let mut lines = vec![format!(
        "subject {subject} registered, original destroyed at {}",
        destroyed.destroyed_at
    )];
    lines.extend(files.iter().map(|f| format!("  {f}")));
    Ok(Outcome {
        report: json!({
            "subject_id": subject,
            "patch_size": cfg.patch_size,
            "share_files": files,
            "allow": allow,
            "original_destroyed_at": destroyed.destroyed_at,
        }),
        lines,
        seed: None,
    })
}

pub fn distribute(cfg: &CliConfig, subject: SubjectId) -> Result<Outcome, CliError> {
    let mut vault = open_vault(cfg)?;
    let record = vault.record(subject).ok_or(VaultError::NotFound(subject))?;
    if !record.active {
        return Err(CliError::new(
            Exit::NotFound,
            format!("subject {subject} was revoked"),
        ));
    }
    let staging = subject_dir(cfg, subject);
    if let Some(plan) = record.placement.clone() {
        store::erase_subject_dir(&staging)?;
        let lines = vec![format!(
            "subject {subject} already distributed ({:?})",
            plan.case
        )];
        return Ok(Outcome {
            report: json!({ "already_distributed": true, "plan": plan }),
            lines,
            seed: None,
        });
    }
    let files = store::share_files(&staging)?;
    if files.is_empty() {
        return Err(CliError::new(
            Exit::NotFound,
            format!("no staged shares for {subject} in {}", staging.display()),
        ));
    }
    let grids = read_grids(&files)?;
    let offline: Vec<InstitutionId> = (0..cfg.institutions as InstitutionId)
        .filter(|&k| store::is_offline(&cfg.institutions_dir, k))
        .collect();
    if !offline.is_empty() {
        return Err(CliError::new(
            Exit::Unreachable,
            format!("institutions {offline:?} are offline"),
        ));
    }

    let dist = plan_distribution(&grids, cfg.institutions, &mut *rng(cfg))?;
    for (a, grid) in dist.plan.assignments.iter().zip(&dist.grids) {
        let dir =
            store::institution_dir(&cfg.institutions_dir, a.institution).join(subject.to_string());
        fs::create_dir_all(&dir)?;
        share_file::write_file(&dir.join(store::file_name(grid)), grid)?;
    }
    vault.set_placement(subject, dist.plan.clone())?;
    store::erase_subject_dir(&staging)?;

    let mut lines = vec![format!(
        "subject {subject}: {:?} over {} institutions, {} grids placed",
        dist.plan.case,
        cfg.institutions,
        dist.plan.assignments.len()
    )];
    if !dist.plan.dropped.is_empty() {
        lines.push(format!(
            "warning: patches {:?} not stored",
            dist.plan.dropped
        ));
    }
    Ok(Outcome {
        report: json!({ "already_distributed": false, "plan": dist.plan }),
        lines,
        seed: None,
    })
}

pub struct TrainOptions {
    pub requester: String,
    pub subjects: Vec<SubjectId>,
    pub trainer: TrainerKind,
    pub trainer_addr: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn train(cfg: &CliConfig, opts: &TrainOptions) -> Result<Outcome, CliError> {
    let vault = open_vault(cfg)?;
    let outcome = match vault.validate_training_request(&opts.requester, &opts.subjects) {
        Ok(o) => o,
        Err(VaultError::NoData { excluded }) => {
            let report = json!({ "authorized": [], "excluded": excluded });
            return Err(CliError::new(Exit::NoData, "no authorized subjects").with_report(report));
        }
        Err(e) => return Err(e.into()),
    };
    let round_cfg = RoundConfig {
        trainer: opts.trainer,
        trainer_addr: opts.trainer_addr.clone(),
        deadline_s: f64::MAX,
        ..RoundConfig::default()
    };
    round_cfg.validate()?;
    let trainer = round_cfg.build_trainer()?;
    let n_p = round_cfg.n_p;
    let local: Vec<NodeProfile> = (0..n_p)
        .map(|i| NodeProfile::workstation(format!("local-ws-{i}"), 1.0, f64::MAX))
        .collect();
    let share_bytes = GridShape::new(cfg.patch_size, cfg.patch_size, 3)
        .map(|s| s.len())
        .unwrap_or(0);
    let workload = RoundWorkload::for_subjects(outcome.authorized.len(), share_bytes);
    let round = TrainingRound::plan(
        1,
        outcome.authorized_ids(),
        &local,
        n_p,
        workload,
        f64::MAX,
        &FairnessLedger::default(),
    )?;

    let source = DirInstitutions {
        root: cfg.institutions_dir.clone(),
    };
    let registry = BufferRegistry::new();
    let traffic = TrafficLog::default();
    let outputs = dispatch_and_reconstruct(
        &round,
        &outcome.authorized,
        &source,
        &registry,
        &traffic,
        Exec::default(),
    );
    let result = train_round(outputs, n_p, trainer.as_ref(), Exec::default())?;
    if registry.live_count() != 0 {
        return Err(CliError::new(
            Exit::Internal,
            "reconstructed patches outlived the round",
        ));
    }
    if let Some(out) = &opts.out {
        fs::write(out, serde_json::to_vec_pretty(&result.embeddings)?)?;
    }

    let m = &result.metrics;
    let mut lines = vec![
        format!(
            "trainer {}: {} subjects, {} patches trained",
            m.trainer, m.subjects, m.patches_trained
        ),
        format!("excluded: {}", outcome.excluded.len()),
        format!("model digest {}", m.model_digest),
    ];
    lines.extend(m.flagged.iter().map(|f| {
        format!(
            "flagged {} patch {:?}: {}",
            f.subject_id, f.patch_index, f.reason
        )
    }));
    Ok(Outcome {
        report: json!({
            "authorized": outcome.authorized_ids(),
            "excluded": outcome.excluded,
            "metrics": m,
            "embeddings_file": opts.out.as_ref().map(|p| p.display().to_string()),
        }),
        lines,
        seed: None,
    })
}

pub fn rtbf(cfg: &CliConfig, subject: SubjectId) -> Result<Outcome, CliError> {
    let mut vault = open_vault(cfg)?;
    let c = vault.rtbf_revoke(subject)?;
    let staged = store::erase_subject_dir(&subject_dir(cfg, subject))?;
    let lines = vec![
        format!(
            "subject {subject} {} at {}",
            if c.already_revoked {
                "was already revoked"
            } else {
                "revoked"
            },
            c.revoked_at
        ),
        format!("institutions awaiting collection: {:?}", c.gc_targets),
    ];
    Ok(Outcome {
        report: json!({
            "subject_id": subject,
            "revoked_at": c.revoked_at,
            "already_revoked": c.already_revoked,
            "gc_targets": c.gc_targets,
            "staged_files_erased": staged,
        }),
        lines,
        seed: None,
    })
}

pub fn gc(cfg: &CliConfig) -> Result<Outcome, CliError> {
    let mut vault = open_vault(cfg)?;
    let mut dir = DirInstitutions {
        root: cfg.institutions_dir.clone(),
    };
    let report = vault.gc_abandoned_shares(&mut dir)?;
    let mut lines = vec![format!(
        "{} deletions acknowledged, {} queued",
        report.acknowledged.len(),
        report.queued.len()
    )];
    lines.extend(
        report
            .queued
            .iter()
            .map(|q| format!("queued {} at institution {}", q.subject_id, q.institution)),
    );
    Ok(Outcome {
        report: serde_json::to_value(&report)?,
        lines,
        seed: None,
    })
}

fn group_label(grid: &ShareGrid) -> String {
    match grid.role() {
        ShareRole::Authentication => "AS".into(),
        _ => PatchKind::from_index(grid.patch_index()).map_or_else(
            |_| format!("patch_{}", grid.patch_index()),
            |k| k.to_string(),
        ),
    }
}

fn grouped(dir: &Path) -> Result<BTreeMap<String, Vec<ShareGrid>>, CliError> {
    let files = store::share_files(dir)?;
    if files.is_empty() {
        return Err(CliError::new(
            Exit::NotFound,
            format!("no share files under {}", dir.display()),
        ));
    }
    let mut out: BTreeMap<String, Vec<ShareGrid>> = BTreeMap::new();
    for g in read_grids(&files)? {
        out.entry(group_label(&g)).or_default().push(g);
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn metric_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(Exit::InvalidInput, e.to_string())
}

fn report_lines(r: &MetricReport) -> Vec<String> {
    let mut lines: Vec<String> = r
        .per_kind
        .iter()
        .map(|(k, v)| format!("{k:<14} {v:.6}"))
        .collect();
    if let Some(t) = r.theoretical {
        lines.push(format!("{:<14} {t:.6}", "theoretical"));
    }
    lines
}

pub fn metrics_entropy(shares: &Path) -> Result<Outcome, CliError> {
    let mut r = MetricReport::new("entropy");
    for (label, grids) in grouped(shares)? {
        let channels = grids[0].shape().channels() as usize;
        let mut per_channel = vec![Vec::new(); channels];
        for g in &grids {
            for (c, acc) in per_channel.iter_mut().enumerate() {
                acc.push(shannon_entropy(g.bytes(), g.shape(), c).map_err(metric_err)?);
            }
        }
        let means: Vec<f64> = per_channel.iter().map(|v| mean(v)).collect();
        r.per_kind.insert(label.clone(), mean(&means));
        r.per_channel.insert(label, means);
        r.samples += grids.len() as u64;
    }
    r.theoretical = Some(8.0);
    Ok(Outcome {
        lines: report_lines(&r),
        report: serde_json::to_value(&r)?,
        seed: None,
    })
}

pub fn metrics_corr(shares: &Path) -> Result<Outcome, CliError> {
    let mut r = MetricReport::new("adjacent_correlation");
    for (label, grids) in grouped(shares)? {
        let mut by_dir = Vec::new();
        for dir in Direction::ALL {
            let mut acc = Vec::new();
            for g in &grids {
                for c in 0..g.shape().channels() as usize {
                    acc.push(
                        adjacent_correlation(g.bytes(), g.shape(), dir, c)
                            .map_err(metric_err)?
                            .abs(),
                    );
                }
            }
            by_dir.push(mean(&acc));
        }
        r.per_kind.insert(label.clone(), mean(&by_dir));
        r.per_channel.insert(label, by_dir);
        r.samples += grids.len() as u64;
    }
    r.parameters.insert(
        "directions".into(),
        json!(["horizontal", "vertical", "diagonal"]),
    );
    r.parameters
        .insert("statistic".into(), json!("mean absolute Pearson r"));
    r.theoretical = Some(0.0);
    Ok(Outcome {
        lines: report_lines(&r),
        report: serde_json::to_value(&r)?,
        seed: None,
    })
}

/// Pairwise NPCR between consecutive shares of each kind, or a synthetic
/// campaign of `trials` fresh shares per kind when no directory is given.
pub fn metrics_npcr(
    cfg: &CliConfig,
    shares: Option<&Path>,
    trials: usize,
) -> Result<Outcome, CliError> {
    let mut r = MetricReport::new("npcr");
    let mut used_seed = None;
    match shares {
        Some(dir) => {
            for (label, grids) in grouped(dir)? {
                let values = grids
                    .windows(2)
                    .filter(|w| w[0].shape() == w[1].shape())
                    .map(|w| npcr(w[0].bytes(), w[1].bytes()))
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(metric_err)?;
                if !values.is_empty() {
                    r.per_kind.insert(label, mean(&values));
                    r.samples += values.len() as u64;
                }
            }
            r.parameters.insert("mode".into(), json!("pairwise"));
        }
        None => {
            let seed = cfg.seed.unwrap_or_else(|| production_rng().next_u64());
            used_seed = Some(seed);
            let shape = GridShape::new(cfg.patch_size, cfg.patch_size, 3).map_err(metric_err)?;
            let mut rng = seeded(seed);
            for kind in PatchKind::ALL {
                let mut px = vec![0u8; shape.len()];
                rng.fill_bytes(&mut px);
                let patch = PatchImage::new(kind, shape, px).map_err(metric_err)?;
                r.merge(npcr_campaign(&patch, trials, seed, Exec::default()).map_err(metric_err)?);
            }
            r.parameters.insert("mode".into(), json!("campaign"));
            r.parameters.insert("campaign_seed".into(), json!(seed));
        }
    }
    let positions = cfg.patch_size as usize * cfg.patch_size as usize * 3;
    r.theoretical = Some(UNIFORM_NPCR);
    r.parameters.insert(
        "uniform_stderr".into(),
        json!(uniform_npcr_stderr(positions)),
    );
    Ok(Outcome {
        lines: report_lines(&r),
        report: serde_json::to_value(&r)?,
        seed: used_seed,
    })
}

pub fn metrics_bruteforce(width: u32, height: u32, channels: u32) -> Result<Outcome, CliError> {
    let est = brute_force_log_probability(width, height, channels).map_err(metric_err)?;
    Ok(Outcome {
        lines: vec![format!("{width}x{height}x{channels}: {est}")],
        report: json!({ "width": width, "height": height, "channels": channels, "rendered": est.to_string(), "estimate": est }),
        seed: None,
    })
}

pub fn simulate(
    cfg: &CliConfig,
    scenario: &Path,
    trace: Option<&Path>,
    audit: bool,
) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(scenario).map_err(|e| {
        CliError::new(
            Exit::Config,
            format!("scenario {}: {e}", scenario.display()),
        )
    })?;
    let mut sim = Simulation::new(Scenario::from_json(&text)?)?;
    if let Some(seed) = cfg.seed {
        sim = sim.with_seed(seed);
    }
    let out = sim.run()?;
    if let Some(path) = trace {
        fs::write(path, out.trace_jsonl())?;
    }
    let mut lines = vec![format!(
        "seed {} trace {} ({} messages, {:.3} s)",
        out.seed,
        out.trace_hash,
        out.trace.len(),
        out.end_time_s
    )];
    for r in &out.rounds {
        lines.push(format!(
            "round {}: {:?} {}",
            r.round_id,
            r.status,
            r.reason.as_deref().unwrap_or("")
        ));
    }
    let mut report = json!({
        "seed": out.seed,
        "trace_hash": out.trace_hash,
        "messages": out.trace.len(),
        "end_time_s": out.end_time_s,
        "rounds": out.rounds,
        "gc_reports": out.gc_reports,
        "workstation_pairs": out.workstation_pairs().len(),
        "trace_file": trace.map(|p| p.display().to_string()),
    });
    if audit {
        let sweep = single_link_sweep(&out.trace, &out.originals);
        let unsafe_links: Vec<String> = sweep
            .iter()
            .filter(|o| !o.reconstructable().is_empty())
            .map(|o| {
                o.tapped
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        lines.push(format!(
            "single-link audit: {} links, {} reconstructable",
            sweep.len(),
            unsafe_links.len()
        ));
        report["single_link_audit"] =
            json!({ "links": sweep.len(), "reconstructable": unsafe_links });
    }
    Ok(Outcome {
        report,
        lines,
        seed: Some(out.seed),
    })
}
