use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

use deid_core::evalkit::{deid_effective_rate, EvalReport, ToyVerifier};
use deid_core::facegeom::{write_landmark_jsonl, AffineTransform, LandmarkRecord, LandmarkSet};
use deid_core::fatm::{load_checkpoint, FatmModel};
use deid_core::image::Image;
use deid_core::rng;
use deid_core::toyfaces::{render_samples_for, sample_separable_identities, IdentityParams};
use deid_core::trainer::{write_loss_csv, FaceSet, Trainer};

use crate::config::{DonorMode, PipelineConfig};
use crate::dataset::{load_face_set, load_landmarks, FrameJob, LANDMARKS_FILE};
use crate::pipeline::Deidentifier;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(path: &Path) -> Result<FatmModel<f32>> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pick_donor(model: &FatmModel<f32>, requested: Option<&str>) -> Result<String> {
    match requested {
        Some(d) if model.has_donor(d) => Ok(d.to_string()),
        Some(d) => {
            let known: Vec<&str> = model.donor_ids().collect();
            bail!("donor `{d}` is not in the checkpoint (known: {})", known.join(", "))
        }
        None => model.donor_ids().next().map(str::to_string).ok_or_else(|| anyhow!("checkpoint has no donors")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub iterations: u64,
    /// Mean L1 of the last iteration, per set.
    pub final_losses: Vec<(String, f64)>,
}

/// Trains on the configured face sets, writing the checkpoint (with its
/// optimizer sidecar) at every interval and at the end, and the loss history
/// to `<out>/loss.csv`.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let dirs = &cfg.train.face_sets;
    if dirs.len() < 2 {
        bail!("training needs at least two face-set directories, got {}", dirs.len());
    }
    let sets = dirs.iter().map(|d| load_face_set(d)).collect::<Result<Vec<FaceSet>>>()?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        create_dir(parent)?;
    }
    let params = cfg.train.params.clone();
    let resuming = cfg.train.resume && ckpt.is_file();
    let mut trainer = if resuming {
        Trainer::resume(&sets, params, &ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?
    } else {
        Trainer::new(&sets, params)?
    };

    let loss_path = out.join(LOSS_FILE);
    let append = resuming && loss_path.is_file();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&loss_path)
        .with_context(|| format!("opening {}", loss_path.display()))?;
    let mut csv = BufWriter::new(file);
    if !append {
        write_loss_csv(&mut csv, &[], true)?;
    }
    let mut written = 0;
    trainer.run(|t| {
        t.save(&ckpt)?;
        write_loss_csv(&mut csv, &t.history()[written..], false).map_err(|e| deid_core::Error::Io {
            path: loss_path.clone(),
            source: e,
        })?;
        csv.flush().map_err(|e| deid_core::Error::Io {
            path: loss_path.clone(),
            source: e,
        })?;
        written = t.history().len();
        Ok(())
    })?;
    trainer.save(&ckpt)?;
    write_loss_csv(&mut csv, &trainer.history()[written..], false)?;
    csv.flush()?;

    let last = trainer.iteration().saturating_sub(1);
    let final_losses = trainer
        .history()
        .iter()
        .filter(|r| r.iteration == last)
        .map(|r| (r.set_id.clone(), r.loss))
        .collect();
    Ok(TrainSummary {
        checkpoint: ckpt,
        iterations: trainer.iteration(),
        final_losses,
    })
}

/// Outcome of one input frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ManifestEntry {
    Ok {
        image: String,
        output: String,
        transform: AffineTransform,
        mask_area: f64,
        feather_sigma: f64,
    },
    Skipped {
        image: String,
        reason: String,
    },
    Error {
        image: String,
        message: String,
    },
}

impl ManifestEntry {
    pub fn image(&self) -> &str {
        match self {
            ManifestEntry::Ok { image, .. } | ManifestEntry::Skipped { image, .. } | ManifestEntry::Error { image, .. } => image,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub job: String,
    pub donor: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub donor_mode: DonorMode,
    pub jobs: Vec<JobManifest>,
}

/// Wall-clock seconds per processed frame, kept apart from the manifest so
/// that the manifest is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub job: String,
    pub image: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub frames: Vec<FrameTiming>,
    pub mean_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct DeidSummary {
    pub manifest: Manifest,
    pub timings: Timings,
}

/// De-identifies every frame of every input directory into
/// `<out>/<job>/<frame>`, writing `manifest.json` and `timings.json`.
pub fn cmd_deid(cfg: &PipelineConfig) -> Result<DeidSummary> {
    let d = &cfg.deid;
    if d.inputs.is_empty() {
        bail!("deid needs at least one input directory");
    }
    if d.landmarks.is_some() && d.inputs.len() > 1 {
        bail!("deid.landmarks can only be set with a single input");
    }
    let jobs = d
        .inputs
        .iter()
        .map(|dir| FrameJob::load(dir, d.landmarks.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for j in &jobs {
        if !seen.insert(j.name.clone()) {
            bail!("two inputs share the job name `{}`", j.name);
        }
    }
    let model = load_model(&cfg.checkpoint_path())?;
    let first = pick_donor(&model, d.donor.as_deref())?;
    let donors: Vec<String> = match d.donor_mode {
        DonorMode::Fixed => vec![first; jobs.len()],
        DonorMode::RoundRobin => {
            let ids: Vec<&str> = model.donor_ids().collect();
            let start = ids.iter().position(|i| *i == first).unwrap_or(0);
            (0..jobs.len()).map(|k| ids[(start + k) % ids.len()].to_string()).collect()
        }
    };

    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut manifest = Manifest {
        donor_mode: d.donor_mode,
        jobs: Vec::new(),
    };
    let mut frames = Vec::new();
    for (job, donor) in jobs.iter().zip(donors) {
        let dir = out.join(&job.name);
        create_dir(&dir)?;
        if d.write_masks {
            create_dir(&dir.join("masks"))?;
        }
        let deid = Deidentifier::new(&model, &donor, d.feather_scale)?;
        let mut entries = Vec::with_capacity(job.frames.len());
        for f in &job.frames {
            let Some(lm) = &f.landmarks else {
                entries.push(ManifestEntry::Skipped {
                    image: f.name.clone(),
                    reason: "no landmark record".into(),
                });
                continue;
            };
            let start = Instant::now();
            let result = Image::load_png(&f.path).and_then(|img| deid.run(&img, lm));
            let entry = match result {
                Ok(face) => {
                    face.image.save_png(&dir.join(&f.name))?;
                    if d.write_masks {
                        face.mask.save_png(&dir.join("masks").join(&f.name))?;
                    }
                    frames.push(FrameTiming {
                        job: job.name.clone(),
                        image: f.name.clone(),
                        seconds: start.elapsed().as_secs_f64(),
                    });
                    ManifestEntry::Ok {
                        image: f.name.clone(),
                        output: format!("{}/{}", job.name, f.name),
                        transform: face.transform,
                        mask_area: face.mask_area,
                        feather_sigma: face.sigma,
                    }
                }
                Err(e) => ManifestEntry::Error {
                    image: f.name.clone(),
                    message: e.to_string(),
                },
            };
            entries.push(entry);
        }
        manifest.jobs.push(JobManifest {
            job: job.name.clone(),
            donor,
            entries,
        });
    }
    let mean_seconds = if frames.is_empty() {
        0.0
    } else {
        frames.iter().map(|f| f.seconds).sum::<f64>() / frames.len() as f64
    };
    let timings = Timings { frames, mean_seconds };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write_json(&out.join(TIMINGS_FILE), &timings)?;
    Ok(DeidSummary { manifest, timings })
}

/// One line of a pairs file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: String,
    pub b: String,
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub donor: String,
    /// Each pair's first image de-identified, verified against the second.
    pub paired: EvalReport,
    /// Each distinct first image de-identified, verified against itself.
    pub self_deid: EvalReport,
}

struct LandmarkCache(HashMap<PathBuf, BTreeMap<String, LandmarkSet>>);

impl LandmarkCache {
    fn lookup(&mut self, image: &Path) -> Result<Option<LandmarkSet>> {
        let dir = image.parent().unwrap_or(Path::new(".")).to_path_buf();
        if !self.0.contains_key(&dir) {
            let src = dir.join(LANDMARKS_FILE);
            let marks = if src.is_file() { load_landmarks(&src, &[])? } else { BTreeMap::new() };
            self.0.insert(dir.clone(), marks);
        }
        let name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(self.0[&dir].get(&name).cloned())
    }
}

/// Runs the paired and self protocols, writing `report.json` plus per-pair
/// CSV files.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalOutput> {
    let e = &cfg.eval;
    let pairs_path = e.pairs.as_ref().ok_or_else(|| anyhow!("eval.pairs is not set"))?;
    let verifier_path = e.verifier.as_ref().ok_or_else(|| anyhow!("eval.verifier is not set"))?;
    let verifier: ToyVerifier = read_json(verifier_path)?;
    let records = read_pairs(pairs_path)?;
    if records.is_empty() {
        bail!("{} lists no pairs", pairs_path.display());
    }
    let base = pairs_path.parent().unwrap_or(Path::new("."));
    let model = load_model(&cfg.checkpoint_path())?;
    let donor = pick_donor(&model, e.donor.as_deref())?;
    let deid = Deidentifier::new(&model, &donor, e.feather_scale)?;

    let mut images: BTreeMap<String, Image> = BTreeMap::new();
    let mut marks = LandmarkCache(HashMap::new());
    let mut landmarks: BTreeMap<String, Option<LandmarkSet>> = BTreeMap::new();
    for r in &records {
        for name in [&r.a, &r.b] {
            if !images.contains_key(name) {
                let p = base.join(name);
                images.insert(name.clone(), Image::load_png(&p)?);
                landmarks.insert(name.clone(), marks.lookup(&p)?);
            }
        }
    }

    let run = |list: Vec<(&String, &String)>| -> Result<EvalReport> {
        let pairs: Vec<(Image, Image)> = list.iter().map(|(a, b)| (images[*a].clone(), images[*b].clone())).collect();
        let firsts: Vec<&String> = list.iter().map(|(a, _)| *a).collect();
        let report = deid_effective_rate(
            &pairs,
            |img| {
                let k = pairs.iter().position(|p| std::ptr::eq(&p.0, img)).expect("image comes from the pair list");
                let lm = landmarks[firsts[k]]
                    .as_ref()
                    .ok_or_else(|| deid_core::Error::InvalidInput(format!("no landmarks for {}", firsts[k])))?;
                Ok(deid.run(img, lm)?.image)
            },
            &verifier,
        )?;
        Ok(report)
    };
    let paired = run(records.iter().map(|r| (&r.a, &r.b)).collect())?;
    let mut distinct: Vec<&String> = Vec::new();
    for r in &records {
        if !distinct.contains(&&r.a) {
            distinct.push(&r.a);
        }
    }
    let self_deid = run(distinct.iter().map(|a| (*a, *a)).collect())?;

    let out = cfg.out_dir();
    create_dir(&out)?;
    let report = EvalOutput {
        donor,
        paired,
        self_deid,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    for (name, r) in [("paired_pairs.csv", &report.paired), ("self_pairs.csv", &report.self_deid)] {
        let p = out.join(name);
        let mut w = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        r.write_pairs_csv(&mut w)?;
        w.flush()?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub subject: String,
    pub identity: IdentityParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub subjects: Vec<SubjectInfo>,
    pub pairs: usize,
}

fn frame_name(i: usize, n: usize) -> String {
    let digits = n.saturating_sub(1).to_string().len().max(4);
    format!("frame_{i:0digits$}.png")
}

fn write_frames(dir: &Path, id: &IdentityParams, n: usize, seed: u64, size: usize) -> Result<Vec<String>> {
    create_dir(dir)?;
    let mut names = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for (i, s) in render_samples_for(id, 0, n, seed, size)?.into_iter().enumerate() {
        let name = frame_name(i, n);
        s.image.save_png(&dir.join(&name))?;
        records.push(LandmarkRecord {
            image: name.clone(),
            points: s.landmarks,
        });
        names.push(name);
    }
    write_landmark_jsonl(&dir.join(LANDMARKS_FILE), &records)?;
    Ok(names)
}

/// Renders a toy corpus: `<out>/<subject>/` training frames,
/// `<out>/heldout/<subject>/` held-out frames, `verifier.json` fitted on the
/// held-out frames, `pairs.jsonl` of same-subject held-out pairs, and
/// `identities.json`.
pub fn cmd_gen_toy(cfg: &PipelineConfig) -> Result<GenSummary> {
    let g = &cfg.gen_toy;
    let seed = cfg.seed();
    let subjects: Vec<SubjectInfo> = if g.random_identities > 0 {
        sample_separable_identities(g.random_identities, seed)
            .into_iter()
            .enumerate()
            .map(|(k, identity)| SubjectInfo {
                subject: format!("subject{k}"),
                identity,
            })
            .collect()
    } else {
        g.identities
            .iter()
            .map(|&k| {
                Ok(SubjectInfo {
                    subject: format!("id{k}"),
                    identity: IdentityParams::preset(k)?,
                })
            })
            .collect::<Result<_>>()?
    };
    if subjects.is_empty() {
        bail!("gen_toy needs at least one identity");
    }
    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut heldout: Vec<(String, Vec<String>)> = Vec::new();
    for (k, s) in subjects.iter().enumerate() {
        let train_seed = rng::derive_seed(seed, &[rng::name_key("train"), k as u64]);
        write_frames(&out.join(&s.subject), &s.identity, g.images, train_seed, g.size)?;
        if g.heldout > 0 {
            let held_seed = rng::derive_seed(seed, &[rng::name_key("heldout"), k as u64]);
            let names = write_frames(&out.join("heldout").join(&s.subject), &s.identity, g.heldout, held_seed, g.size)?;
            heldout.push((s.subject.clone(), names));
        }
    }
    write_json(&out.join("identities.json"), &subjects)?;

    let mut n_pairs = 0;
    if g.heldout > 0 {
        if subjects.len() >= 2 {
            let sets = heldout
                .iter()
                .map(|(subject, names)| {
                    let dir = out.join("heldout").join(subject);
                    let imgs = names.iter().map(|n| Image::load_png(&dir.join(n))).collect::<deid_core::Result<Vec<_>>>()?;
                    Ok((subject.clone(), imgs))
                })
                .collect::<Result<Vec<_>>>()?;
            write_json(&out.join("verifier.json"), &ToyVerifier::fit(&sets)?)?;
        }
        let mut r = rng::stream(seed, &[rng::name_key("pairs")]);
        let mut lines = String::new();
        for p in 0..g.pairs {
            let (subject, names) = &heldout[p % heldout.len()];
            let i = r.gen_range(0..names.len() as u64) as usize;
            let mut j = i;
            if names.len() > 1 {
                j = r.gen_range(0..names.len() as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
            }
            let rec = PairRecord {
                a: format!("heldout/{subject}/{}", names[i]),
                b: format!("heldout/{subject}/{}", names[j]),
            };
            lines += &serde_json::to_string(&rec)?;
            lines.push('\n');
        }
        fs::write(out.join("pairs.jsonl"), lines)?;
        n_pairs = g.pairs;
    }
    Ok(GenSummary {
        subjects,
        pairs: n_pairs,
    })
}

/// Successful entries of a job.
pub fn ok_entries(job: &JobManifest) -> impl Iterator<Item = &ManifestEntry> {
    job.entries.iter().filter(|e| matches!(e, ManifestEntry::Ok { .. }))
}
