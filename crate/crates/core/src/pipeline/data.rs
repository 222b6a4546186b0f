//! Synthetic dataset splits and their on-disk layout.

use std::fs;
use std::path::Path;

use crate::datagen::{
    gen_scene, read_frame_file, scribble_sim, semi_supervise, write_frame_file, Domain, Frame, SceneConfig,
};
use crate::error::{Error, Result};

use super::config::{RunConfig, Supervision};

/// Training frames (target domain, weakly labeled), dense source-domain
/// frames for the guide, and densely labeled evaluation frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Frame>,
    pub source: Vec<Frame>,
    pub eval: Vec<Frame>,
    pub scene: SceneConfig,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.scene.num_classes()
    }
}

/// Scene seed of frame `index` in split `split` of dataset `seed`.
fn frame_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split << 40) ^ index as u64
}

/// Generates all three splits from `cfg.seed` and applies the configured
/// supervision to the training split.
pub fn generate_dataset(cfg: &RunConfig, scene: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let target = scene.clone().with_domain(Domain::Target);
    let source_cfg = scene.clone().with_domain(Domain::Source);
    let mut train = (0..cfg.train_frames)
        .map(|i| gen_scene(frame_seed(cfg.seed, 1, i), &target))
        .collect::<Result<Vec<_>>>()?;
    match cfg.supervision {
        Supervision::Dense => train = train.into_iter().map(Frame::densely_labeled).collect(),
        Supervision::Weak(budget) => {
            for (i, f) in train.iter_mut().enumerate() {
                *f = scribble_sim(f, budget, frame_seed(cfg.seed, 4, i))?.0;
            }
        }
        Supervision::Semi(rate) => {
            train = train.into_iter().map(Frame::densely_labeled).collect();
            semi_supervise(&mut train, rate)?;
        }
    }
    let source = (0..cfg.source_frames)
        .map(|i| gen_scene(frame_seed(cfg.seed, 2, i), &source_cfg).map(Frame::densely_labeled))
        .collect::<Result<Vec<_>>>()?;
    let eval = (0..cfg.eval_frames)
        .map(|i| gen_scene(frame_seed(cfg.seed, 3, i), &target).map(Frame::densely_labeled))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        train,
        source,
        eval,
        scene: scene.clone(),
    })
}

pub const CONFIG_FILE: &str = "config.txt";
const SPLITS: [&str; 3] = ["train", "source", "eval"];

/// Writes `DIR/{train,source,eval}/NNNNN.fdf` and `DIR/config.txt`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset, cfg: &RunConfig) -> Result<()> {
    let dir = dir.as_ref();
    for (name, frames) in SPLITS.iter().zip([&data.train, &data.source, &data.eval]) {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        for (i, f) in frames.iter().enumerate() {
            write_frame_file(sub.join(format!("{i:05}.fdf")), f)?;
        }
    }
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn read_split(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "fdf"));
    paths.sort();
    paths.iter().map(read_frame_file).collect()
}

/// Reads a directory written by [`write_dataset`]. The scene description
/// is the default one; the stored configuration records everything else.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, RunConfig)> {
    let dir = dir.as_ref();
    let cfg = RunConfig::from_text(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let train = read_split(&dir.join("train"))?;
    let source = read_split(&dir.join("source"))?;
    let eval = read_split(&dir.join("eval"))?;
    let scene = SceneConfig::default();
    if let Some(f) = train
        .iter()
        .chain(&eval)
        .find(|f| f.num_classes as usize != scene.num_classes())
    {
        return Err(Error::format(
            "dataset",
            format!("frame has {} classes, expected {}", f.num_classes, scene.num_classes()),
        ));
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::format("dataset", "train and eval splits must not be empty"));
    }
    Ok((
        Dataset {
            train,
            source,
            eval,
            scene,
        },
        cfg,
    ))
}
