//! Corpus I/O: the in-memory `Song` type, directory scanning in the
//! `root/<song>/{mixture,vocals,drums,bass,other}.wav` layout, and the
//! synthetic corpus generator.

pub mod synth;
pub mod wav;

pub use synth::{synth_corpus, SourceGenParams, SynthSpec};
pub use wav::{read_wav, read_wav_channels, write_wav};

use crate::error::Result;
use crate::source::PerSource;
use std::path::Path;

/// One song: a mixture plus whichever stems exist for it.
#[derive(Debug, Clone)]
pub struct Song {
    pub song_id: String,
    pub sample_rate: u32,
    pub mixture: Vec<Vec<f64>>,
    pub stems: PerSource<Option<Vec<Vec<f64>>>>,
}

impl Song {
    pub fn channels(&self) -> usize {
        self.mixture.len()
    }

    pub fn len_samples(&self) -> usize {
        self.mixture.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Largest absolute difference between the mixture and the sum of the
    /// present stems (only meaningful when all four stems exist).
    pub fn mixture_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for c in 0..self.channels() {
            for i in 0..self.len_samples() {
                let mut sum = 0.0;
                for (_, stem) in self.stems.iter() {
                    if let Some(s) = stem {
                        sum += s[c][i];
                    }
                }
                worst = worst.max((self.mixture[c][i] - sum).abs());
            }
        }
        worst
    }
}

/// Result of scanning a corpus directory.
#[derive(Debug)]
pub struct CorpusScan {
    pub songs: Vec<Song>,
    pub warnings: Vec<String>,
}

/// Load every song directory under `root` in lexicographic order.
///
/// A song without `mixture.wav` is skipped with a warning; missing stems
/// are allowed and simply absent (such songs can still feed the task
/// databases of the stems they do have). Stems that disagree with the
/// mixture in length, channel count or sample rate are dropped with a
/// warning.
pub fn scan_corpus(root: &Path) -> Result<CorpusScan> {
    let mut dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut songs = Vec::new();
    let mut warnings = Vec::new();
    for dir in dirs {
        let song_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mix_path = dir.join("mixture.wav");
        if !mix_path.exists() {
            warnings.push(format!("{song_id}: missing mixture.wav, skipped"));
            continue;
        }
        let (mixture, sample_rate) = match read_wav(&mix_path) {
            Ok(x) => x,
            Err(e) => {
                warnings.push(format!("{song_id}: unreadable mixture ({e}), skipped"));
                continue;
            }
        };
        let channels = mixture.len();
        let len = mixture[0].len();
        let stems = PerSource::from_fn(|src| {
            let p = dir.join(format!("{}.wav", src.name()));
            if !p.exists() {
                return None;
            }
            match read_wav(&p) {
                Ok((buffers, rate)) => {
                    if rate != sample_rate || buffers.len() != channels || buffers[0].len() != len {
                        warnings.push(format!(
                            "{song_id}: stem {src} does not match the mixture, dropped"
                        ));
                        None
                    } else {
                        Some(buffers)
                    }
                }
                Err(e) => {
                    warnings.push(format!("{song_id}: unreadable stem {src} ({e}), dropped"));
                    None
                }
            }
        });
        songs.push(Song {
            song_id,
            sample_rate,
            mixture,
            stems,
        });
    }
    Ok(CorpusScan { songs, warnings })
}

/// Write a corpus to disk in the scanned layout.
pub fn write_corpus(songs: &[Song], root: &Path) -> Result<()> {
    for song in songs {
        let dir = root.join(&song.song_id);
        std::fs::create_dir_all(&dir)?;
        write_wav(&dir.join("mixture.wav"), &song.mixture, song.sample_rate)?;
        for (src, stem) in song.stems.iter() {
            if let Some(s) = stem {
                write_wav(&dir.join(format!("{}.wav", src.name())), s, song.sample_rate)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::SourceId;

    fn write_tiny_corpus(root: &Path) {
        let spec = SynthSpec {
            n_songs: 2,
            duration_s: 2.0,
            sample_rate: 8000,
            ..SynthSpec::default()
        };
        let songs = synth_corpus(&spec).unwrap();
        write_corpus(&songs, root).unwrap();
    }

    #[test]
    fn scan_finds_complete_songs_in_order() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny_corpus(dir.path());
        let scan = scan_corpus(dir.path()).unwrap();
        assert_eq!(scan.songs.len(), 2);
        assert!(scan.warnings.is_empty());
        assert_eq!(scan.songs[0].song_id, "song00");
        assert_eq!(scan.songs[1].song_id, "song01");
        for song in &scan.songs {
            assert!(song.stems.values().all(|s| s.is_some()));
            // WAV storage is f32, so additivity survives to ~1e-7 relative.
            assert!(song.mixture_residual() < 1e-6);
        }
    }

    #[test]
    fn missing_stem_is_allowed_missing_mixture_skips() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny_corpus(dir.path());
        std::fs::remove_file(dir.path().join("song00/drums.wav")).unwrap();
        std::fs::remove_file(dir.path().join("song01/mixture.wav")).unwrap();
        let scan = scan_corpus(dir.path()).unwrap();
        assert_eq!(scan.songs.len(), 1);
        assert_eq!(scan.songs[0].song_id, "song00");
        assert!(scan.songs[0].stems[SourceId::Drums].is_none());
        assert!(scan.songs[0].stems[SourceId::Vocals].is_some());
        assert_eq!(scan.warnings.len(), 1);
        assert!(scan.warnings[0].contains("song01"));
    }

    #[test]
    fn empty_root_scans_empty() {
        let dir = tempfile::tempdir().unwrap();
        let scan = scan_corpus(dir.path()).unwrap();
        assert!(scan.songs.is_empty());
        assert!(scan.warnings.is_empty());
    }
}
