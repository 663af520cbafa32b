use std::fs;
use std::path::{Path, PathBuf};

use canopy_core::audio::{decode_wav, AudioClip, LogMelSpectrogram, FRONTEND_TAG};
use canopy_core::model::{read_container, Container, CONTAINER_MAGIC};
use canopy_core::{Error, Result};

/// Tensor name and `arch_id` of a stored spectrogram.
pub const LOGMEL_KIND: &str = "logmel";

/// Expands directories (one level, `.wav` files only) and returns every
/// input in lexicographic order without duplicates.
pub fn collect_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in fs::read_dir(p)? {
                let path = entry?.path();
                let is_wav = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
                if is_wav && path.is_file() {
                    out.push(path);
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn clip_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Audio or a precomputed spectrogram.
pub enum Loaded {
    Audio(AudioClip),
    Spectrogram(LogMelSpectrogram),
}

/// Decodes a WAV file or a stored log-mel container, sniffing the magic.
pub fn load_input(path: &Path, bytes: &[u8]) -> Result<Loaded> {
    if bytes.starts_with(CONTAINER_MAGIC) {
        let c = read_container(bytes)?;
        if c.arch_id != LOGMEL_KIND {
            return Err(Error::Validation(format!("{} holds {:?}, not a spectrogram", path.display(), c.arch_id)));
        }
        if c.preproc_tag != FRONTEND_TAG {
            return Err(Error::Validation(format!("{} was featurized with {:?}", path.display(), c.preproc_tag)));
        }
        let t = c
            .tensor(LOGMEL_KIND)
            .ok_or_else(|| Error::Validation(format!("{} has no {LOGMEL_KIND} tensor", path.display())))?;
        return Ok(Loaded::Spectrogram(LogMelSpectrogram::from_tensor(t)?));
    }
    decode_wav(bytes, &clip_id(path)).map(Loaded::Audio)
}

pub fn logmel_container(spec: &LogMelSpectrogram) -> Container {
    let mut c = Container::new(LOGMEL_KIND, 0, FRONTEND_TAG);
    c.tensors.push((LOGMEL_KIND.into(), spec.to_tensor()));
    c
}
