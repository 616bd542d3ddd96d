//! NPY and PGM files, plus on-disk inversion trajectories.
//!
//! Every writer goes through a temporary file in the destination directory
//! followed by a rename, so readers never see a half-written file.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use ndarray::{Array2, Array3, Array4, Axis};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::attnmask::{BinaryMask, Heatmap};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::invert::{AttentionRecord, InversionTrajectory, StepLoss};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::file(path, "not a file path"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.map(|d| d.join(&tmp_name)).unwrap_or_else(|| PathBuf::from(&tmp_name));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::file(path, e)
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

fn npy_bytes<A: WriteNpyExt>(arr: &A) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    arr.write_npy(&mut buf)
        .map_err(|e| Error::Invalid(format!("npy encode: {e}")))?;
    Ok(buf)
}

pub fn save_npy2(path: &Path, arr: &Array2<f64>) -> Result<()> {
    write_atomic(path, &npy_bytes(arr)?)
}

pub fn save_npy3(path: &Path, arr: &Array3<f64>) -> Result<()> {
    write_atomic(path, &npy_bytes(arr)?)
}

pub fn save_latent(path: &Path, z: &LatentGrid) -> Result<()> {
    save_npy3(path, z.as_array())
}

pub fn save_heatmap(path: &Path, h: &Heatmap) -> Result<()> {
    save_npy2(path, h.as_array())
}

/// Reads an `f64` or `f32` array of any rank.
fn read_npy_dyn(path: &Path) -> Result<ndarray::ArrayD<f64>> {
    let bytes = read_bytes(path)?;
    match ndarray::ArrayD::<f64>::read_npy(Cursor::new(&bytes)) {
        Ok(a) => Ok(a),
        Err(first) => ndarray::ArrayD::<f32>::read_npy(Cursor::new(&bytes))
            .map(|a| a.mapv(f64::from))
            .map_err(|_| Error::file(path, format!("not an f64/f32 NPY array: {first}"))),
    }
}

/// Loads a `C×H×W` latent; a 2-D array is read as a single channel.
pub fn load_latent(path: &Path) -> Result<LatentGrid> {
    let arr = read_npy_dyn(path)?;
    let arr = match arr.ndim() {
        2 => arr.insert_axis(Axis(0)),
        3 => arr,
        n => return Err(Error::file(path, format!("expected a 2-D or 3-D array, got {n}-D"))),
    };
    let arr = arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::file(path, e))?;
    LatentGrid::new(arr).map_err(|e| Error::file(path, e))
}

pub fn load_npy3(path: &Path) -> Result<Array3<f64>> {
    read_npy_dyn(path)?
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::file(path, e))
}

pub fn load_npy2(path: &Path) -> Result<Array2<f64>> {
    read_npy_dyn(path)?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::file(path, e))
}

/// Binary (P5) 8-bit PGM.
pub fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::file(path, e))?;
    write_atomic(path, &buf)
}

/// Returns `(width, height, pixels)` of an 8-bit grayscale PNM.
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::file(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    save_pgm(path, mask.width(), mask.height(), &mask.to_gray_bytes())
}

/// Pixels above 127 are inside the mask.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, px) = load_pgm(path)?;
    Ok(BinaryMask::from_fn(h, w, |y, x| px[y * w + x] > 127))
}

/// Channel 0 mapped linearly from `[-1, 1]` to `[0, 255]`, clamped.
pub fn preview_bytes(z: &LatentGrid) -> Vec<u8> {
    z.as_array()
        .index_axis(Axis(0), 0)
        .iter()
        .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
        .collect()
}

pub fn save_preview(path: &Path, z: &LatentGrid) -> Result<()> {
    save_pgm(path, z.width(), z.height(), &preview_bytes(z))
}

/// An image to invert: an NPY latent, or a PGM mapped to `[-1, 1]`.
pub fn load_image_latent(path: &Path) -> Result<LatentGrid> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("npy") => load_latent(path),
        Some("pgm") | Some("pnm") => {
            let (w, h, px) = load_pgm(path)?;
            let vals = px.iter().map(|&v| v as f64 / 255.0 * 2.0 - 1.0).collect();
            LatentGrid::from_vec(1, h, w, vals)
        }
        _ => Err(Error::file(path, "expected a .npy or .pgm file")),
    }
}

pub const TRAJECTORY_INDEX: &str = "index.json";

/// `index.json` of a saved trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryIndex {
    pub prompt: String,
    pub latent_shape: [usize; 3],
    pub timesteps: Vec<usize>,
    pub guidance_scale: f64,
    pub pivots: String,
    pub null_embeddings: String,
    pub null_losses: Vec<StepLoss>,
    pub attention_timesteps: Vec<usize>,
    pub attention: Vec<TokenFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenFile {
    pub index: usize,
    pub token: String,
    pub file: String,
}

/// Writes pivots, null embeddings, per-token attention stacks and the index.
pub fn save_trajectory(dir: &Path, traj: &InversionTrajectory, prompt: &str) -> Result<TrajectoryIndex> {
    let (c, h, w) = traj.input_latent().shape();
    let mut pivots = Array4::zeros((traj.pivots.len(), c, h, w));
    for (mut slot, p) in pivots.outer_iter_mut().zip(&traj.pivots) {
        slot.assign(p.as_array());
    }
    write_atomic(&dir.join("pivots.npy"), &npy_bytes(&pivots)?)?;

    let dim = traj.null_embeddings.first().map_or(0, Vec::len);
    let flat: Vec<f64> = traj.null_embeddings.iter().flatten().copied().collect();
    let nulls = Array2::from_shape_vec((traj.null_embeddings.len(), dim), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    save_npy2(&dir.join("null_embeddings.npy"), &nulls)?;

    let rec = &traj.attention;
    let mut attention = Vec::new();
    if !rec.is_empty() {
        for (k, token) in rec.tokens().iter().enumerate() {
            let file = format!("attention_token_{k}.npy");
            save_npy3(&dir.join(&file), &rec.token_stack(k))?;
            attention.push(TokenFile {
                index: k,
                token: token.clone(),
                file,
            });
        }
    }

    let index = TrajectoryIndex {
        prompt: prompt.to_string(),
        latent_shape: [c, h, w],
        timesteps: traj.timesteps.clone(),
        guidance_scale: traj.guidance_scale,
        pivots: "pivots.npy".into(),
        null_embeddings: "null_embeddings.npy".into(),
        null_losses: traj.null_losses.clone(),
        attention_timesteps: rec.timesteps().to_vec(),
        attention,
    };
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    write_atomic(&dir.join(TRAJECTORY_INDEX), &json)?;
    Ok(index)
}

pub fn load_trajectory_index(dir: &Path) -> Result<TrajectoryIndex> {
    let path = dir.join(TRAJECTORY_INDEX);
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::file(&path, e))
}

/// Attention record only; cheaper than [`load_trajectory`].
pub fn load_attention(dir: &Path, index: &TrajectoryIndex) -> Result<AttentionRecord> {
    if index.attention.is_empty() {
        return Ok(AttentionRecord::default());
    }
    let stacks = index
        .attention
        .iter()
        .map(|f| load_npy3(&dir.join(&f.file)))
        .collect::<Result<Vec<_>>>()?;
    let tokens = index.attention.iter().map(|f| f.token.clone()).collect();
    AttentionRecord::from_token_stacks(tokens, index.attention_timesteps.clone(), &stacks)
}

pub fn load_trajectory(dir: &Path) -> Result<(InversionTrajectory, TrajectoryIndex)> {
    let index = load_trajectory_index(dir)?;
    let pivots_path = dir.join(&index.pivots);
    let pivots_arr = read_npy_dyn(&pivots_path)?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::file(&pivots_path, e))?;
    let pivots = pivots_arr
        .outer_iter()
        .map(|p| LatentGrid::new(p.to_owned()))
        .collect::<Result<Vec<_>>>()?;
    if pivots.len() != index.timesteps.len() {
        return Err(Error::file(
            &pivots_path,
            format!("{} pivots for {} timesteps", pivots.len(), index.timesteps.len()),
        ));
    }
    let nulls = load_npy2(&dir.join(&index.null_embeddings))?;
    let null_embeddings = nulls.outer_iter().map(|r| r.to_vec()).collect();
    let traj = InversionTrajectory {
        timesteps: index.timesteps.clone(),
        pivots,
        guidance_scale: index.guidance_scale,
        null_embeddings,
        null_losses: index.null_losses.clone(),
        attention: load_attention(dir, &index)?,
    };
    Ok((traj, index))
}
