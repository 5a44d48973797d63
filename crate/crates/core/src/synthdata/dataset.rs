//! On-disk dataset layout:
//!
//! ```text
//! manifest.txt            "id condition n_gts" per frame
//! rgb/NNNNNN.ppm          P6
//! thermal/NNNNNN.pgm      P5
//! gt/NNNNNN.txt           "x1 y1 x2 y2" per pedestrian
//! distractors/NNNNNN.txt  "x1 y1 x2 y2" per pedestrian-like clutter object
//! proposals/NNNNNN.txt    "x1 y1 x2 y2 score" per proposal
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::proposals::{
    format_boxes, format_proposals, load_boxes, load_proposals, synth_proposals, Proposal, ProposalConfig,
};
use crate::rng::Rng;
use crate::synthdata::netpbm::{read_image, write_image};
use crate::synthdata::{generate_scene, Condition, SceneConfig, ScenePair};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub scene: ScenePair,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub frames: usize,
    pub night_frac: f64,
    pub seed: u64,
    pub scene: SceneConfig,
    pub proposals: ProposalConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            frames: 100,
            night_frac: 0.5,
            seed: 0,
            scene: SceneConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

/// Frame `i` is a night frame when `floor((i+1) f) > floor(i f)`: exactly
/// `floor(n f)` of the first `n` frames are night, spread evenly.
pub fn night_assignment(index: usize, night_frac: f64) -> bool {
    ((index + 1) as f64 * night_frac).floor() > (index as f64 * night_frac).floor()
}

/// Frame `i` draws from its own stream `(seed, i)`, so frames are independent of
/// each other and of the total frame count.
pub fn generate_frame(cfg: &DatasetConfig, id: usize) -> Result<Frame> {
    let mut rng = Rng::derive(cfg.seed, id as u64);
    let condition = if night_assignment(id, cfg.night_frac) {
        Condition::Night
    } else {
        Condition::Day
    };
    let scene = generate_scene(&cfg.scene, condition, &mut rng)?;
    let proposals = synth_proposals(
        &scene.gts,
        &scene.distractors,
        scene.width(),
        scene.height(),
        &mut rng,
        &cfg.proposals,
    );
    Ok(Frame { id, scene, proposals })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Frame>> {
    if !(0.0..=1.0).contains(&cfg.night_frac) {
        return Err(Error::invalid(format!("night fraction {} not in [0, 1]", cfg.night_frac)));
    }
    (0..cfg.frames).map(|i| generate_frame(cfg, i)).collect()
}

fn name(id: usize) -> String {
    format!("{id:06}")
}

pub fn write_dataset(dir: &Path, frames: &[Frame]) -> Result<()> {
    for sub in ["rgb", "thermal", "gt", "distractors", "proposals"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = String::new();
    for f in frames {
        let n = name(f.id);
        write_image(&dir.join("rgb").join(format!("{n}.ppm")), &f.scene.rgb)?;
        write_image(&dir.join("thermal").join(format!("{n}.pgm")), &f.scene.thermal)?;
        fs::write(dir.join("gt").join(format!("{n}.txt")), format_boxes(&f.scene.gts))?;
        fs::write(
            dir.join("distractors").join(format!("{n}.txt")),
            format_boxes(&f.scene.distractors),
        )?;
        fs::write(
            dir.join("proposals").join(format!("{n}.txt")),
            format_proposals(&f.proposals),
        )?;
        writeln!(manifest, "{n} {} {}", f.scene.condition.as_str(), f.scene.gts.len()).unwrap();
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    pub condition: Condition,
    pub n_gts: usize,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.clone(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", f.len())));
        }
        let id = f[0].parse().map_err(|e| parse_err(format!("id: {e}")))?;
        let condition = Condition::parse(f[1]).ok_or_else(|| parse_err(format!("condition {:?}", f[1])))?;
        let n_gts = f[2].parse().map_err(|e| parse_err(format!("n_gts: {e}")))?;
        out.push(ManifestEntry { id, condition, n_gts });
    }
    Ok(out)
}

/// Load every `stride`-th manifest entry (positions 0, stride, 2*stride, ...).
pub fn read_dataset(dir: &Path, stride: usize) -> Result<Vec<Frame>> {
    if stride == 0 {
        return Err(Error::invalid("frame stride must be >= 1"));
    }
    let manifest = read_manifest(dir)?;
    let mut frames = Vec::new();
    for entry in manifest.iter().step_by(stride) {
        let n = name(entry.id);
        let rgb = read_image(&dir.join("rgb").join(format!("{n}.ppm")))?;
        let thermal = read_image(&dir.join("thermal").join(format!("{n}.pgm")))?;
        let rgb_path = dir.join("rgb").join(format!("{n}.ppm"));
        if rgb.shape()[0] != 3 || thermal.shape()[0] != 1 || rgb.shape()[1..] != thermal.shape()[1..] {
            return Err(Error::Format {
                path: rgb_path,
                message: format!("rgb {:?} and thermal {:?} are not aligned", rgb.shape(), thermal.shape()),
            });
        }
        let gts = load_boxes(&dir.join("gt").join(format!("{n}.txt")))?;
        let dpath = dir.join("distractors").join(format!("{n}.txt"));
        let distractors = if dpath.exists() { load_boxes(&dpath)? } else { Vec::new() };
        let ppath = dir.join("proposals").join(format!("{n}.txt"));
        let proposals = if ppath.exists() { load_proposals(&ppath)? } else { Vec::new() };
        frames.push(Frame {
            id: entry.id,
            scene: ScenePair {
                rgb,
                thermal,
                gts,
                distractors,
                condition: entry.condition,
            },
            proposals,
        });
    }
    Ok(frames)
}
