//! The end-to-end dataset builder: scenes to scored, recaptioned edit pairs.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grammar::{recaption, InstructionMode, Task};
use super::manifest::{Manifest, ManifestRecord, MANIFEST_FILE};
use super::objects::{extract_objects, gen_masks};
use super::pairs::{build_edit_pair, EditSample};
use super::scorer::{quality_filter, ScorerAdapter};
use super::world::gen_scene;
use crate::error::{Error, Result};

pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_scenes: usize,
    pub base_seed: u64,
    pub tau_conf: f64,
    pub tau_q: f64,
    pub close_radius: usize,
    pub tasks: Vec<Task>,
    pub modes: Vec<InstructionMode>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_scenes: 10,
            base_seed: 0,
            tau_conf: 0.5,
            tau_q: 7.0,
            close_radius: 1,
            tasks: Task::ALL.to_vec(),
            modes: InstructionMode::ALL.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_conf) {
            return Err(Error::Config(format!("tau_conf {} outside [0, 1]", self.tau_conf)));
        }
        if !(0.0..=10.0).contains(&self.tau_q) {
            return Err(Error::Config(format!("tau_q {} outside [0, 10]", self.tau_q)));
        }
        if self.close_radius == 0 {
            return Err(Error::Config("close_radius must be at least 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub scenes: usize,
    pub objects_found: usize,
    pub masks_kept: usize,
    pub pairs_built: usize,
    pub rows: usize,
    pub accepted: usize,
    pub unscored: usize,
}

pub struct PipelineOutput {
    pub manifest: Manifest,
    pub stats: PipelineStats,
    /// (seed, global caption) per scene.
    pub captions: Vec<(u64, String)>,
}

impl PipelineStats {
    pub fn merge(&mut self, other: &PipelineStats) {
        self.scenes += other.scenes;
        self.objects_found += other.objects_found;
        self.masks_kept += other.masks_kept;
        self.pairs_built += other.pairs_built;
        self.rows += other.rows;
        self.accepted += other.accepted;
        self.unscored += other.unscored;
    }
}

impl PipelineOutput {
    pub fn partial_failure(&self) -> bool {
        self.stats.unscored > 0
    }
}

fn write_pair(sample: &EditSample, out_dir: &Path) -> Result<[String; 3]> {
    let rel = |suffix: &str| format!("{IMAGE_DIR}/{}_{suffix}", sample.pair_id);
    let paths = [rel("src.ppm"), rel("tgt.ppm"), rel("mask.pgm")];
    sample.source.save_ppm(&out_dir.join(&paths[0]))?;
    sample.target.save_ppm(&out_dir.join(&paths[1]))?;
    sample.mask.save_pgm(&out_dir.join(&paths[2]))?;
    Ok(paths)
}

/// Rows, counts and captions for one contiguous range of scene indices.
struct Chunk {
    records: Vec<ManifestRecord>,
    stats: PipelineStats,
    captions: Vec<(u64, String)>,
}

fn run_scenes(config: &PipelineConfig, scorer: &mut ScorerAdapter, out_dir: &Path, scenes: Range<usize>) -> Result<Chunk> {
    let mut rows_out = Vec::new();
    let mut stats = PipelineStats::default();
    let mut captions = Vec::new();

    for i in scenes {
        let seed = config.base_seed + i as u64;
        let (scene, _) = gen_scene(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        stats.scenes += 1;

        let (records, caps) = extract_objects(&scene);
        stats.objects_found += records.len();
        captions.push((seed, caps.global_caption));
        let kept = gen_masks(&scene, records, config.tau_conf);
        stats.masks_kept += kept.len();

        for record in &kept {
            for &task in &config.tasks {
                let pair = build_edit_pair(&scene, record, task, config.close_radius, &mut rng)?;
                stats.pairs_built += 1;
                let [src, tgt, mask] = write_pair(&pair, out_dir)?;
                for &mode in &config.modes {
                    let text = recaption(
                        &pair.instruction,
                        task,
                        record,
                        pair.replacement.as_deref(),
                        &scene,
                        mode,
                        &mut rng,
                    );
                    let mut sample = pair.with_instruction(mode, text);
                    let accepted = match quality_filter(
                        &mut sample,
                        scorer,
                        config.tau_q,
                        &out_dir.join(&src),
                        &out_dir.join(&tgt),
                    ) {
                        Ok(a) => a,
                        Err(Error::Scorer(_)) => {
                            stats.unscored += 1;
                            false
                        }
                        Err(e) => return Err(e),
                    };
                    stats.rows += 1;
                    stats.accepted += usize::from(accepted);
                    rows_out.push(ManifestRecord {
                        id: sample.id(),
                        task,
                        mode,
                        instruction: sample.instruction,
                        src_path: src.clone(),
                        tgt_path: tgt.clone(),
                        mask_path: mask.clone(),
                        scores: sample.scores,
                        accepted,
                    });
                }
            }
        }
    }
    Ok(Chunk {
        records: rows_out,
        stats,
        captions,
    })
}

fn prepare(config: &PipelineConfig, out_dir: &Path) -> Result<()> {
    config.validate()?;
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))
}

fn finish(chunks: Vec<Chunk>, out_dir: &Path) -> Result<PipelineOutput> {
    let mut manifest = Manifest::default();
    let mut stats = PipelineStats::default();
    let mut captions = Vec::new();
    for chunk in chunks {
        for r in chunk.records {
            manifest.push(r)?;
        }
        stats.merge(&chunk.stats);
        captions.extend(chunk.captions);
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(PipelineOutput {
        manifest,
        stats,
        captions,
    })
}

/// Build the dataset into `out_dir`, writing images and the manifest.
/// Scorer failures leave the row unscored and rejected; I/O errors abort.
pub fn run_pipeline(config: &PipelineConfig, scorer: &mut ScorerAdapter, out_dir: &Path) -> Result<PipelineOutput> {
    prepare(config, out_dir)?;
    let chunk = run_scenes(config, scorer, out_dir, 0..config.n_scenes)?;
    finish(vec![chunk], out_dir)
}

/// [`run_pipeline`] over `workers` threads, each scoring a contiguous block of
/// scenes with its own scorer. Blocks merge in scene order, so the output is
/// identical to the single-threaded run.
pub fn run_pipeline_parallel(
    config: &PipelineConfig,
    make_scorer: impl Fn() -> ScorerAdapter + Sync,
    workers: usize,
    out_dir: &Path,
) -> Result<PipelineOutput> {
    prepare(config, out_dir)?;
    let n = config.n_scenes;
    let per = n.div_ceil(workers.max(1)).max(1);
    let ranges: Vec<Range<usize>> = (0..n).step_by(per).map(|a| a..(a + per).min(n)).collect();
    let chunks = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| {
                let make = &make_scorer;
                scope.spawn(move || run_scenes(config, &mut make(), out_dir, r))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pipeline worker panicked"))
            .collect::<Result<Vec<Chunk>>>()
    })?;
    finish(chunks, out_dir)
}

/// `n` template removal pairs, one per scene, from scenes `base_seed..`.
/// The removed object is the first kept record of each scene.
pub fn removal_pairs(base_seed: u64, n: usize, tau_conf: f64, close_radius: usize) -> Result<Vec<EditSample>> {
    let mut out = Vec::with_capacity(n);
    let mut seed = base_seed;
    while out.len() < n {
        let (scene, _) = gen_scene(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let (records, _) = extract_objects(&scene);
        if let Some(record) = gen_masks(&scene, records, tau_conf).first() {
            out.push(build_edit_pair(&scene, record, Task::Removal, close_radius, &mut rng)?);
        }
        seed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_matches_kept_objects() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        let out = run_pipeline(&cfg, &mut ScorerAdapter::Mock, dir.path()).unwrap();
        let expected: usize = (0..10)
            .map(|s| {
                let (scene, _) = gen_scene(s);
                let (recs, _) = extract_objects(&scene);
                gen_masks(&scene, recs, 0.5).len() * 9
            })
            .sum();
        assert_eq!(out.manifest.len(), expected);
        assert_eq!(out.stats.rows, expected);
        assert_eq!(out.manifest.count_task(Task::Removal), out.manifest.count_task(Task::Addition));
        out.manifest.validate(dir.path()).unwrap();
        assert_eq!(out.captions.len(), 10);
    }

    #[test]
    fn rejects_bad_thresholds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { tau_conf: 1.5, ..PipelineConfig::default() };
        assert!(run_pipeline(&cfg, &mut ScorerAdapter::Mock, dir.path()).is_err());
    }

    #[test]
    fn parallel_build_matches_serial() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = PipelineConfig { n_scenes: 7, ..PipelineConfig::default() };
        let serial = run_pipeline(&cfg, &mut ScorerAdapter::Mock, a.path()).unwrap();
        let par = run_pipeline_parallel(&cfg, || ScorerAdapter::Mock, 3, b.path()).unwrap();
        assert_eq!(serial.stats, par.stats);
        assert_eq!(serial.captions, par.captions);
        let read = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }
}
