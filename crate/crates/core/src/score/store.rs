//! Corpus directories.
//!
//! ```text
//! <root>/corpus.json             generator config and seed
//! <root>/train/song_00000.json   score with gt_duration_frames
//! <root>/train/song_00000.track  container: f0 [n], uv [n,2], spectral [n,16], word_durations [W]
//! <root>/test/...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::corpus::{split, CorpusConfig, Song};
use super::model::parse_score;
use super::tracks::{PitchTrack, SpectralTrack, SPECTRAL_DIM, UV_CATEGORIES};
use crate::error::{Error, Result};
use crate::numerics::{Container, ParamStore, Tensor};

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";
pub const MANIFEST: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: CorpusConfig,
    pub train_songs: usize,
    pub test_songs: usize,
}

pub fn track_container(song: &Song) -> Result<Container> {
    let n = song.n_frames();
    let mut t = ParamStore::new();
    t.insert("f0", Tensor::new(vec![n], song.pitch.f0.clone())?);
    t.insert(
        "uv",
        Tensor::new(vec![n, UV_CATEGORIES], song.pitch.uv.iter().flatten().copied().collect())?,
    );
    t.insert(
        "spectral",
        Tensor::new(vec![n, SPECTRAL_DIM], song.spectral.flat())?,
    );
    let durs: Vec<f32> = song.word_durations().iter().map(|&d| d as f32).collect();
    t.insert("word_durations", Tensor::new(vec![durs.len()], durs)?);
    Ok(Container::new(json!({ "frames": n }), t))
}

pub fn song_from_parts(score_json: &str, track: &Container) -> Result<Song> {
    let score = parse_score(score_json)?;
    let f0 = track.tensor("f0")?.data().to_vec();
    let uv = track
        .tensor("uv")?
        .data()
        .chunks_exact(UV_CATEGORIES)
        .map(|c| [c[0], c[1]])
        .collect();
    let pitch = PitchTrack::new(f0, uv)?;
    let spectral = SpectralTrack::from_flat(track.tensor("spectral")?.data())?;
    let durs: Vec<u32> = track
        .tensor("word_durations")?
        .data()
        .iter()
        .map(|&d| d as u32)
        .collect();
    let bad = |m: String| Err(Error::Checkpoint(m));
    if spectral.n_frames() != pitch.n_frames() {
        return bad("spectral and pitch tracks differ in length".into());
    }
    if durs.len() != score.words.len() {
        return bad(format!(
            "{} word durations for {} words",
            durs.len(),
            score.words.len()
        ));
    }
    if score.gt_durations().map(|g| g.iter().map(|&d| d as u32).collect::<Vec<_>>())
        != Some(durs.clone())
    {
        return bad("track durations disagree with the score".into());
    }
    if durs.iter().map(|&d| d as usize).sum::<usize>() != pitch.n_frames() {
        return bad("word durations do not cover the track".into());
    }
    Ok(Song {
        score,
        pitch,
        spectral,
    })
}

fn write_split(dir: &Path, songs: &[Song]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, song) in songs.iter().enumerate() {
        let base = dir.join(format!("song_{i:05}"));
        let json_path = base.with_extension("json");
        fs::write(&json_path, song.score.to_json()?).map_err(|e| Error::io(&json_path, e))?;
        track_container(song)?.save(&base.with_extension("track"))?;
    }
    Ok(())
}

/// Write a generated corpus, holding out the last `config.test_songs` songs.
pub fn write_corpus(root: &Path, seed: u64, config: &CorpusConfig, songs: Vec<Song>) -> Result<()> {
    let (train, test) = split(config, songs);
    write_split(&root.join(TRAIN_DIR), &train)?;
    write_split(&root.join(TEST_DIR), &test)?;
    let manifest = Manifest {
        seed,
        config: config.clone(),
        train_songs: train.len(),
        test_songs: test.len(),
    };
    let path = root.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn song_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Load one split (`train` or `test`) in file-name order.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<Song>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::Config(format!("corpus split {} not found", dir.display())));
    }
    song_paths(&dir)?
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let track = Container::load(&p.with_extension("track"))?;
            song_from_parts(&text, &track)
        })
        .collect()
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
