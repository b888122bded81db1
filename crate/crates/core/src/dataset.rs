//! On-disk dataset: clip files, the manifest and label-aware loading.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! world.json        the WorldSpec it was generated from
//! manifest.jsonl    one ClipRecord per line
//! clips/<id>.povc   16-byte header + raw RGB frames
//! ```
//!
//! Clip file header, little-endian: magic `POVC`, u16 version, u16 T, u16 H,
//! u16 W, u32 channels. Frames follow frame-major, row-major, RGB interleaved.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array4, ArrayView4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PovError, Result};
use crate::masking::{FrameCenters, InteractionAnnotation};
use crate::real::Real;
use crate::rng;
use crate::world::{render_clip, script_scene, VideoClip, WorldSpec};

const CLIP_MAGIC: &[u8; 4] = b"POVC";
const CLIP_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    EgoTune,
    EgoTest,
    HeldoutTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::EgoTune, Split::EgoTest, Split::HeldoutTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EgoTune => "ego_tune",
            Split::EgoTest => "ego_test",
            Split::HeldoutTest => "heldout_test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub path: String,
    pub view_id: String,
    pub verb_id: usize,
    pub noun_id: usize,
    pub action_id: usize,
    pub split: Split,
    pub centers: Vec<FrameCenters>,
    pub box_size: u32,
    /// sha256 of the clip file.
    pub checksum: String,
    pub seed: u64,
}

impl ClipRecord {
    pub fn annotation(&self) -> InteractionAnnotation {
        InteractionAnnotation {
            centers: self.centers.clone(),
            box_size: self.box_size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| PovError::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PovError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClipRecord = serde_json::from_str(&line)
                .map_err(|e| PovError::corrupt(path, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Manifest { records })
    }

    /// Checks ids, label encoding and split hygiene against a world.
    pub fn validate(&self, world: &WorldSpec) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.clip_id.as_str()) {
                return Err(PovError::Validation(format!("duplicate clip id `{}`", r.clip_id)));
            }
            validate_record(r, world)?;
        }
        Ok(())
    }
}

fn validate_record(r: &ClipRecord, world: &WorldSpec) -> Result<()> {
    if world.view(&r.view_id).is_none() {
        return Err(PovError::Validation(format!(
            "clip `{}` has unknown view `{}`",
            r.clip_id, r.view_id
        )));
    }
    if r.verb_id >= world.num_verbs || r.noun_id >= world.num_nouns {
        return Err(PovError::Validation(format!("clip `{}` has labels out of range", r.clip_id)));
    }
    if r.action_id != r.verb_id * world.num_nouns + r.noun_id {
        return Err(PovError::Validation(format!(
            "clip `{}`: action {} != verb {} * {} + noun {}",
            r.clip_id, r.action_id, r.verb_id, world.num_nouns, r.noun_id
        )));
    }
    if r.centers.len() != world.frames {
        return Err(PovError::Validation(format!(
            "clip `{}` annotates {} frames, expected {}",
            r.clip_id,
            r.centers.len(),
            world.frames
        )));
    }
    r.annotation().validate(world.height, world.width)
}

/// Serializes frames with the clip header.
pub fn encode_clip(frames: ArrayView4<'_, u8>) -> Result<Vec<u8>> {
    let (t, h, w, c) = frames.dim();
    if c != 3 || t > u16::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(PovError::Validation(format!("cannot encode clip of shape {t}x{h}x{w}x{c}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + frames.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u16).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend(frames.iter().copied());
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<Array4<u8>> {
    if bytes.len() < HEADER_LEN {
        return Err(PovError::corrupt(path, "file shorter than header"));
    }
    if &bytes[0..4] != CLIP_MAGIC {
        return Err(PovError::corrupt(path, "bad magic"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let version = u16_at(4);
    if version != CLIP_VERSION as usize {
        return Err(PovError::corrupt(path, format!("unsupported version {version}")));
    }
    let (t, h, w) = (u16_at(6), u16_at(8), u16_at(10));
    let c = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expect = t * h * w * c;
    if bytes.len() - HEADER_LEN != expect {
        return Err(PovError::corrupt(
            path,
            format!("payload is {} bytes, header implies {expect}", bytes.len() - HEADER_LEN),
        ));
    }
    Array4::from_shape_vec((t, h, w, c), bytes[HEADER_LEN..].to_vec())
        .map_err(|e| PovError::corrupt(path, e.to_string()))
}

struct ClipJob {
    clip_id: String,
    view: usize,
    verb: usize,
    noun: usize,
    split: Split,
}

fn plan(world: &WorldSpec) -> Vec<ClipJob> {
    let mut jobs = Vec::new();
    let views: Vec<_> = world.all_views().map(|v| v.view_id.clone()).collect();
    let n_train = world.train_views.len();
    let ego = views.len() - 1;
    let mut add = |split: Split, view: usize, count: usize| {
        for verb in 0..world.num_verbs {
            for noun in 0..world.num_nouns {
                let action = verb * world.num_nouns + noun;
                for k in 0..count {
                    jobs.push(ClipJob {
                        clip_id: format!("{}-{}-a{action:02}-{k}", split.name(), views[view]),
                        view,
                        verb,
                        noun,
                        split,
                    });
                }
            }
        }
    };
    for v in 0..n_train {
        add(Split::Train, v, world.clips_per_action_per_view);
    }
    add(Split::EgoTune, ego, world.ego_tune_clips_per_action);
    add(Split::EgoTest, ego, world.ego_test_clips_per_action);
    for v in n_train..ego {
        add(Split::HeldoutTest, v, world.heldout_clips_per_action_per_view);
    }
    jobs
}

pub fn render_job(world: &WorldSpec, clip_id: &str, view_id: &str, verb: usize, noun: usize) -> Result<VideoClip> {
    let view = world
        .view(view_id)
        .ok_or_else(|| PovError::UnknownView(view_id.to_string()))?;
    let seed = rng::derive_seed(world.seed, clip_id);
    let script = script_scene(verb, noun, world.num_verbs, world.num_nouns, world.frames, seed)?;
    let (frames, annotation) = render_clip(
        &script,
        view,
        world.height,
        world.width,
        world.box_size,
        world.pixel_noise,
        seed,
    );
    Ok(VideoClip {
        clip_id: clip_id.to_string(),
        view_id: view_id.to_string(),
        verb_id: verb,
        noun_id: noun,
        action_id: verb * world.num_nouns + noun,
        frames,
        annotation,
        seed,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| PovError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PovError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PovError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PovError::io(path, e))
}

/// Renders every split of `world` into `out_dir`. The output is a pure
/// function of `world`.
pub fn generate_dataset(world: &WorldSpec, out_dir: &Path) -> Result<Manifest> {
    world.validate()?;
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| PovError::io(&clips_dir, e))?;
    let views: Vec<_> = world.all_views().map(|v| v.view_id.clone()).collect();
    let records = plan(world)
        .into_par_iter()
        .map(|job| {
            let clip = render_job(world, &job.clip_id, &views[job.view], job.verb, job.noun)?;
            let bytes = encode_clip(clip.frames.view())?;
            let rel = format!("clips/{}.povc", job.clip_id);
            write_atomic(&out_dir.join(&rel), &bytes)?;
            Ok(ClipRecord {
                clip_id: clip.clip_id,
                path: rel,
                view_id: clip.view_id,
                verb_id: clip.verb_id,
                noun_id: clip.noun_id,
                action_id: clip.action_id,
                split: job.split,
                centers: clip.annotation.centers,
                box_size: clip.annotation.box_size,
                checksum: hex::encode(Sha256::digest(&bytes)),
                seed: clip.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { records };
    let spec = serde_json::to_string_pretty(world).expect("world serializes");
    write_atomic(&out_dir.join("world.json"), spec.as_bytes())?;
    write_atomic(&out_dir.join("manifest.jsonl"), manifest.to_jsonl().as_bytes())?;
    Ok(manifest)
}

/// A generated dataset opened from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub world: WorldSpec,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let wpath = root.join("world.json");
        let text = fs::read_to_string(&wpath).map_err(|e| PovError::io(&wpath, e))?;
        let world: WorldSpec =
            serde_json::from_str(&text).map_err(|e| PovError::corrupt(&wpath, e.to_string()))?;
        world.validate()?;
        let manifest = Manifest::read(&root.join("manifest.jsonl"))?;
        manifest.validate(&world)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            world,
            manifest,
        })
    }

    /// Reads and verifies one clip.
    pub fn load_clip(&self, record: &ClipRecord) -> Result<VideoClip> {
        validate_record(record, &self.world)?;
        let path = self.root.join(&record.path);
        let bytes = fs::read(&path).map_err(|e| PovError::io(&path, e))?;
        let frames = decode_clip(&bytes, &path)?;
        let w = &self.world;
        if frames.dim() != (w.frames, w.height, w.width, 3) {
            return Err(PovError::corrupt(
                &path,
                format!("frames are {:?}, world expects {:?}", frames.dim(), (w.frames, w.height, w.width, 3)),
            ));
        }
        let sum = hex::encode(Sha256::digest(&bytes));
        if sum != record.checksum {
            return Err(PovError::corrupt(&path, "checksum mismatch"));
        }
        Ok(VideoClip {
            clip_id: record.clip_id.clone(),
            view_id: record.view_id.clone(),
            verb_id: record.verb_id,
            noun_id: record.noun_id,
            action_id: record.action_id,
            frames,
            annotation: record.annotation(),
            seed: record.seed,
        })
    }
}

/// Maps 8-bit RGB to roughly zero-mean, unit-scale network input.
pub fn to_input<F: Real>(frames: ArrayView4<'_, u8>) -> Array4<F> {
    frames.mapv(|v| F::from_f64_lossy((v as f64 - 128.0) / 64.0))
}

/// Horizontal mirror of a `T x H x W x C` clip.
pub fn flip_frames<A: Clone>(frames: ArrayView4<'_, A>) -> Array4<A> {
    let mut v = frames.to_owned();
    v.invert_axis(ndarray::Axis(2));
    v.as_standard_layout().into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelAccess {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Labels {
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

/// A clip decoded to network input, whose labels are only reachable through
/// the loader that produced it.
#[derive(Debug, Clone)]
pub struct LoadedClip<F> {
    pub clip_id: String,
    pub view_id: String,
    pub frames: Array4<F>,
    pub annotation: InteractionAnnotation,
    labels: Labels,
}

/// In-memory clip set with instrumented label access.
///
/// In `Unlabeled` mode every label request fails and is counted as denied;
/// successful dereferences are counted in both modes.
#[derive(Debug)]
pub struct ClipLoader<F> {
    mode: LabelAccess,
    clips: Vec<LoadedClip<F>>,
    label_reads: AtomicU64,
    denied: AtomicU64,
}

impl<F: Real> ClipLoader<F> {
    pub fn load(dataset: &Dataset, records: &[&ClipRecord], mode: LabelAccess) -> Result<Self> {
        let clips = records
            .par_iter()
            .map(|r| {
                let c = dataset.load_clip(r)?;
                Ok(LoadedClip {
                    clip_id: c.clip_id,
                    view_id: c.view_id,
                    frames: to_input(c.frames.view()),
                    annotation: c.annotation,
                    labels: Labels {
                        verb: c.verb_id,
                        noun: c.noun_id,
                        action: c.action_id,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_clips(clips, mode))
    }

    pub fn from_clips(clips: Vec<LoadedClip<F>>, mode: LabelAccess) -> Self {
        ClipLoader {
            mode,
            clips,
            label_reads: AtomicU64::new(0),
            denied: AtomicU64::new(0),
        }
    }

    pub fn mode(&self) -> LabelAccess {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip(&self, i: usize) -> &LoadedClip<F> {
        &self.clips[i]
    }

    pub fn clips(&self) -> &[LoadedClip<F>] {
        &self.clips
    }

    pub fn labels(&self, i: usize) -> Result<Labels> {
        match self.mode {
            LabelAccess::Labeled => {
                self.label_reads.fetch_add(1, Ordering::Relaxed);
                Ok(self.clips[i].labels)
            }
            LabelAccess::Unlabeled => {
                self.denied.fetch_add(1, Ordering::Relaxed);
                Err(PovError::Protocol(format!(
                    "label of `{}` requested from an unlabeled loader",
                    self.clips[i].clip_id
                )))
            }
        }
    }

    pub fn label_reads(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn denied_label_requests(&self) -> u64 {
        self.denied.load(Ordering::Relaxed)
    }
}

impl<F> LoadedClip<F> {
    pub fn new(clip_id: &str, view_id: &str, frames: Array4<F>, annotation: InteractionAnnotation, labels: Labels) -> Self {
        LoadedClip {
            clip_id: clip_id.to_string(),
            view_id: view_id.to_string(),
            frames,
            annotation,
            labels,
        }
    }
}
