//! On-disk dataset layout: one JSON-lines file per episode plus `manifest.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::expert::{scripted_expert, ExpertConfig};
use super::{Demonstration, Source, Tick};
use crate::error::Error;
use crate::keypoints::{KeypointConfig, KeypointEvent};
use crate::seed::{derive_seed, rng_for};
use crate::sim2d::{make_training_scene, Observation, Scene, SimConfig, Vec2};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One line of an episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpisodeRecord {
    Header {
        scene: Scene,
        source: Source,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Tick {
        t: u64,
        obs: [f64; 4],
        action: [f64; 2],
    },
    Keypoint {
        t: u64,
        kp: [f64; 4],
    },
}

/// Serializes a demonstration with keypoint events inline after their tick.
pub fn episode_lines(demo: &Demonstration) -> Vec<String> {
    let mut records = vec![EpisodeRecord::Header {
        scene: demo.scene.clone(),
        source: demo.source,
        seed: demo.seed,
    }];
    let mut events = demo.keypoints.iter().peekable();
    for tick in &demo.ticks {
        records.push(EpisodeRecord::Tick {
            t: tick.t,
            obs: tick.obs.to_array(),
            action: [tick.action.x, tick.action.y],
        });
        while let Some(e) = events.next_if(|e| e.t <= tick.t) {
            records.push(EpisodeRecord::Keypoint {
                t: e.t,
                kp: [e.x, e.y, e.sin, e.cos],
            });
        }
    }
    records.extend(events.map(|e| EpisodeRecord::Keypoint {
        t: e.t,
        kp: [e.x, e.y, e.sin, e.cos],
    }));
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("episode record serializes"))
        .collect()
}

pub fn write_episode(path: &Path, demo: &Demonstration) -> Result<(), Error> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in episode_lines(demo) {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses an episode file. Errors carry the 1-based line number.
pub fn read_episode(path: &Path) -> Result<Demonstration, Error> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header = None;
    let mut ticks = Vec::new();
    let mut keypoints = Vec::new();
    let mut last_line = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        last_line = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        match record {
            EpisodeRecord::Header { scene, source, seed } => {
                if header.is_some() {
                    return Err(parse_err(i + 1, "duplicate header".into()));
                }
                scene.validate().map_err(|e| parse_err(i + 1, e.to_string()))?;
                header = Some((scene, source, seed));
            }
            _ if header.is_none() => return Err(parse_err(i + 1, "record before header".into())),
            EpisodeRecord::Tick { t, obs, action } => {
                if ticks.last().is_some_and(|prev: &Tick| prev.t >= t) {
                    return Err(parse_err(i + 1, format!("tick {t} out of order")));
                }
                ticks.push(Tick {
                    t,
                    obs: Observation::from_array(obs),
                    action: Vec2::from(action),
                });
            }
            EpisodeRecord::Keypoint { t, kp } => keypoints.push(KeypointEvent {
                t,
                x: kp[0],
                y: kp[1],
                sin: kp[2],
                cos: kp[3],
            }),
        }
    }
    let (scene, source, seed) = header.ok_or_else(|| parse_err(last_line.max(1), "missing header".into()))?;
    if ticks.is_empty() {
        return Err(parse_err(last_line.max(1), "episode has no ticks".into()));
    }
    let demo = Demonstration {
        scene,
        ticks,
        keypoints,
        source,
        seed,
    };
    demo.validate().map_err(|e| parse_err(last_line, e.to_string()))?;
    Ok(demo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub ticks: usize,
    pub keypoints: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub episodes: usize,
    pub attempts: usize,
    pub discarded: usize,
    pub ticks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: Source,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub counts: ManifestCounts,
    pub episodes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            path,
            message: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Builds a manifest describing demonstrations already written to `dir`.
    pub fn describe(
        dir: &Path,
        files: &[(String, &Demonstration)],
        source: Source,
        seed: Option<u64>,
        config_hash: String,
        attempts: usize,
    ) -> Result<Self, Error> {
        let mut episodes = Vec::with_capacity(files.len());
        for (file, demo) in files {
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            episodes.push(ManifestEntry {
                file: file.clone(),
                seed: demo.seed,
                ticks: demo.ticks.len(),
                keypoints: demo.keypoints.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        Ok(Self {
            source,
            seed,
            config_hash,
            counts: ManifestCounts {
                episodes: files.len(),
                attempts,
                discarded: attempts - files.len(),
                ticks: episodes.iter().map(|e| e.ticks).sum(),
            },
            episodes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub n_episodes: usize,
    pub seed: u64,
    pub expert: ExpertConfig,
    pub sim: SimConfig,
    pub keypoints: KeypointConfig,
}

impl CollectConfig {
    pub fn new(n_episodes: usize, seed: u64) -> Self {
        Self {
            n_episodes,
            seed,
            expert: ExpertConfig::default(),
            sim: SimConfig::default(),
            keypoints: KeypointConfig::default(),
        }
    }

    /// Hash of everything except the episode count and seed.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(&(&self.expert, &self.sim, &self.keypoints)).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

pub fn episode_file_name(index: usize) -> String {
    format!("episode_{index:04}.jsonl")
}

/// Runs the expert on fresh training scenes until `n_episodes` demonstrations
/// are kept, writes them to `out` and returns the manifest.
pub fn collect(cfg: &CollectConfig, out: &Path) -> Result<(Manifest, Vec<Demonstration>), Error> {
    if cfg.n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
    }
    cfg.keypoints.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let max_attempts = cfg.n_episodes * 20;
    let mut kept: Vec<Demonstration> = Vec::with_capacity(cfg.n_episodes);
    let mut attempts = 0;
    while kept.len() < cfg.n_episodes {
        if attempts >= max_attempts {
            return Err(Error::InvalidConfig(format!(
                "expert kept only {} of {} demonstrations in {attempts} attempts",
                kept.len(),
                cfg.n_episodes
            )));
        }
        let batch = (cfg.n_episodes - kept.len()).max(8);
        let results: Vec<Option<Demonstration>> = (attempts..attempts + batch)
            .into_par_iter()
            .map(|i| {
                let scene_seed = derive_seed(cfg.seed, &[i as u64]);
                let scene = make_training_scene(scene_seed);
                let mut rng = rng_for(cfg.seed, &[i as u64, 1]);
                scripted_expert(&scene, &mut rng, &cfg.expert, &cfg.sim, &cfg.keypoints).map(|mut d| {
                    d.seed = Some(scene_seed);
                    d
                })
            })
            .collect();
        for r in results {
            attempts += 1;
            if let Some(d) = r {
                kept.push(d);
                if kept.len() == cfg.n_episodes {
                    break;
                }
            }
        }
    }
    let files: Vec<(String, &Demonstration)> =
        kept.iter().enumerate().map(|(i, d)| (episode_file_name(i), d)).collect();
    for (name, demo) in &files {
        write_episode(&out.join(name), demo)?;
    }
    let manifest = Manifest::describe(out, &files, Source::Scripted, Some(cfg.seed), cfg.config_hash(), attempts)?;
    manifest.write(out)?;
    Ok((manifest, kept))
}

/// Loads every episode listed in the manifest, or every `*.jsonl` file in
/// name order when the directory has no manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<Demonstration>, Error> {
    let files: Vec<PathBuf> = if dir.join(MANIFEST_FILE).exists() {
        Manifest::read(dir)?.episodes.iter().map(|e| dir.join(&e.file)).collect()
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        files
    };
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    files.iter().map(|p| read_episode(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collection_is_deterministic_and_round_trips() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = CollectConfig::new(4, 9);
        let (ma, demos) = collect(&cfg, a.path()).unwrap();
        let (mb, _) = collect(&cfg, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.episodes.len(), 4);
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded, demos);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let scene = crate::sim2d::make_eval_scene(crate::sim2d::Setup::Clear);
        let header = serde_json::to_string(&EpisodeRecord::Header {
            scene,
            source: Source::Teleop,
            seed: None,
        })
        .unwrap();
        fs::write(&path, format!("{header}\n{{\"t\":0,\"obs\":[0.7,0,0,0],\"action\":[0.75,0]}}\n{{oops\n")).unwrap();
        match read_episode(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, format!("{header}\n")).unwrap();
        assert!(matches!(read_episode(&path), Err(Error::Parse { line: 1, .. })));
    }
}
