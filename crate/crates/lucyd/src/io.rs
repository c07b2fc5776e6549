//! On-disk artifacts: LVOL volume files, LCKP checkpoint containers,
//! 16-bit PGM projection images, CSV reports and JSONL logs.
//!
//! Both binary formats share one layout: a 4-byte magic, a little-endian
//! u32 header length, a JSON header space-padded so the payload begins on
//! a 16-byte boundary, then little-endian f32 payload bytes. Writers are
//! deterministic so identical inputs produce byte-identical files.

use crate::error::{Error, Result};
use crate::volgrid::{Real, Volume};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const LVOL_MAGIC: &[u8; 4] = b"LVOL";
const LCKP_MAGIC: &[u8; 4] = b"LCKP";

/// Pads a JSON header with trailing spaces until magic + length word +
/// header is a multiple of 16 bytes.
fn pad_header(json: String) -> Vec<u8> {
    let mut bytes = json.into_bytes();
    while (8 + bytes.len()) % 16 != 0 {
        bytes.push(b' ');
    }
    bytes
}

fn write_container(path: &Path, magic: &[u8; 4], header_json: String, payload: &[f32]) -> Result<()> {
    let header = pad_header(header_json);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(magic)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for v in payload {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_container(path: &Path, magic: &[u8; 4]) -> Result<(Vec<u8>, Vec<f32>)> {
    let mut file = BufReader::new(File::open(path)?);
    let mut got_magic = [0u8; 4];
    file.read_exact(&mut got_magic)
        .map_err(|_| Error::format(format!("{}: file too short for magic", path.display())))?;
    if &got_magic != magic {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            got_magic,
            magic
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::format(format!("{}: file too short for header length", path.display())))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if (8 + header_len) % 16 != 0 {
        return Err(Error::format(format!(
            "{}: header length {header_len} breaks 16-byte payload alignment",
            path.display()
        )));
    }
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    let mut payload_bytes = Vec::new();
    file.read_to_end(&mut payload_bytes)?;
    if payload_bytes.len() % 4 != 0 {
        return Err(Error::format(format!(
            "{}: payload length {} is not a whole number of 32-bit values",
            path.display(),
            payload_bytes.len()
        )));
    }
    let payload = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

#[derive(Serialize, Deserialize)]
struct LvolHeader {
    version: u32,
    dtype: String,
    axes: String,
    shape: [usize; 4],
}

/// Writes a single-precision volume as an LVOL file.
pub fn write_lvol(path: &Path, v: &Volume<f32>) -> Result<()> {
    let (c, d, h, w) = v.shape();
    let header = LvolHeader { version: 1, dtype: "f32le".into(), axes: "CDHW".into(), shape: [c, d, h, w] };
    write_container(path, LVOL_MAGIC, serde_json::to_string(&header).map_err(json_err)?, v.data())
}

/// Reads an LVOL file back into a volume, validating header and payload.
pub fn read_lvol(path: &Path) -> Result<Volume<f32>> {
    let (header, payload) = read_container(path, LVOL_MAGIC)?;
    let header: LvolHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::format(format!("{}: malformed volume header: {e}", path.display())))?;
    if header.version != 1 {
        return Err(Error::format(format!("{}: unsupported volume version {}", path.display(), header.version)));
    }
    if header.dtype != "f32le" || header.axes != "CDHW" {
        return Err(Error::format(format!(
            "{}: unsupported dtype/axes {}/{}",
            path.display(),
            header.dtype,
            header.axes
        )));
    }
    let [c, d, h, w] = header.shape;
    if payload.len() != c * d * h * w {
        return Err(Error::format(format!(
            "{}: payload holds {} values but shape {:?} needs {}",
            path.display(),
            payload.len(),
            header.shape,
            c * d * h * w
        )));
    }
    Volume::from_vec(c, d, h, w, payload)
}

/// A named f32 tensor inside a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct LckpManifest {
    version: u32,
    config: serde_json::Value,
    epoch: u64,
    tensors: Vec<TensorEntry>,
}

/// Writes an LCKP checkpoint: an opaque JSON config blob, the epoch
/// counter, and named tensors concatenated after the manifest. Offsets in
/// the manifest are relative to the payload start.
pub fn write_lckp(path: &Path, config: &serde_json::Value, epoch: u64, tensors: &[NamedTensor]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for t in tensors {
        let expect: usize = t.shape.iter().product();
        if expect != t.data.len() {
            return Err(Error::shape(format!(
                "tensor {} holds {} values but shape {:?} needs {expect}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            byte_offset: (payload.len() * 4) as u64,
            byte_len: (t.data.len() * 4) as u64,
        });
        payload.extend_from_slice(&t.data);
    }
    let manifest = LckpManifest { version: 1, config: config.clone(), epoch, tensors: entries };
    write_container(path, LCKP_MAGIC, serde_json::to_string(&manifest).map_err(json_err)?, &payload)
}

/// Reads an LCKP checkpoint, validating tensor offsets against the
/// payload before slicing.
pub fn read_lckp(path: &Path) -> Result<(serde_json::Value, u64, Vec<NamedTensor>)> {
    let (header, payload) = read_container(path, LCKP_MAGIC)?;
    let manifest: LckpManifest = serde_json::from_slice(&header)
        .map_err(|e| Error::format(format!("{}: malformed checkpoint manifest: {e}", path.display())))?;
    if manifest.version != 1 {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            manifest.version
        )));
    }
    let payload_bytes = (payload.len() * 4) as u64;
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.tensors.len());
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let expect = e.shape.iter().product::<usize>() as u64 * 4;
        if e.byte_len != expect {
            return Err(Error::format(format!(
                "{}: tensor {} spans {} bytes but shape {:?} needs {expect}",
                path.display(),
                e.name,
                e.byte_len,
                e.shape
            )));
        }
        if e.byte_offset % 4 != 0 || e.byte_offset + e.byte_len > payload_bytes {
            return Err(Error::format(format!(
                "{}: tensor {} offset {}..{} escapes the {payload_bytes}-byte payload",
                path.display(),
                e.name,
                e.byte_offset,
                e.byte_offset + e.byte_len
            )));
        }
        spans.push((e.byte_offset, e.byte_offset + e.byte_len));
        let lo = (e.byte_offset / 4) as usize;
        let hi = ((e.byte_offset + e.byte_len) / 4) as usize;
        tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data: payload[lo..hi].to_vec() });
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::format(format!("{}: overlapping tensor spans in checkpoint", path.display())));
        }
    }
    Ok((manifest.config, manifest.epoch, tensors))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::format(format!("JSON serialization failed: {e}"))
}

/// Serializes a value as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: malformed JSON: {e}", path.display())))
}

/// Appends one compact JSON object per line.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(json_err)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    Ok(())
}

/// Axis of a maximum-intensity projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionAxis {
    /// Collapse depth: the familiar top-down view, rows = h, cols = w.
    Lateral,
    /// Collapse height: a side-on view exposing depth, rows = d, cols = w.
    Axial,
}

/// Maximum-intensity projection of a single-channel volume. Returns
/// (rows, cols, row-major pixels).
pub fn project_max<T: Real>(v: &Volume<T>, axis: ProjectionAxis) -> Result<(usize, usize, Vec<T>)> {
    if v.channels() != 1 {
        return Err(Error::shape(format!("projection expects a single-channel volume, got {}", v.channels())));
    }
    let (d, h, w) = v.spatial();
    match axis {
        ProjectionAxis::Lateral => {
            let mut img = vec![T::neg_infinity(); h * w];
            for z in 0..d {
                for y in 0..h {
                    for (p, &s) in img[y * w..(y + 1) * w].iter_mut().zip(v.row(0, z, y)) {
                        if s > *p {
                            *p = s;
                        }
                    }
                }
            }
            Ok((h, w, img))
        }
        ProjectionAxis::Axial => {
            let mut img = vec![T::neg_infinity(); d * w];
            for z in 0..d {
                for y in 0..h {
                    for (p, &s) in img[z * w..(z + 1) * w].iter_mut().zip(v.row(0, z, y)) {
                        if s > *p {
                            *p = s;
                        }
                    }
                }
            }
            Ok((d, w, img))
        }
    }
}

/// Writes a 16-bit binary PGM (P5, maxval 65535, big-endian samples),
/// linearly rescaling pixel values to the full range. A constant image
/// maps to all zeros.
pub fn write_pgm16<T: Real>(path: &Path, rows: usize, cols: usize, pixels: &[T]) -> Result<()> {
    if pixels.len() != rows * cols {
        return Err(Error::shape(format!(
            "image holds {} pixels but dimensions {rows}x{cols} need {}",
            pixels.len(),
            rows * cols
        )));
    }
    let lo = pixels.iter().copied().fold(T::infinity(), T::min).as_f64();
    let hi = pixels.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
    let span = hi - lo;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{cols} {rows}\n65535\n")?;
    for p in pixels {
        let v = if span > 0.0 { ((p.as_f64() - lo) / span * 65535.0).round() as u16 } else { 0 };
        out.write_all(&v.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Renders a number with six significant digits, '.' decimal separator
/// and no grouping; infinities render as "inf"/"-inf".
pub fn fmt_sig(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let decimals = (5 - x.abs().log10().floor() as i64).clamp(0, 12) as usize;
    format!("{x:.decimals$}")
}

/// One long-form metric record: a method evaluated at one degradation
/// cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub sigma_b: f64,
    pub sigma_n: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Writes long-form metric rows: `method,sigma_b,sigma_n,ssim,psnr`.
pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("method,sigma_b,sigma_n,ssim,psnr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            fmt_sig(r.sigma_b),
            fmt_sig(r.sigma_n),
            fmt_sig(r.ssim),
            fmt_sig(r.psnr)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One degradation cell of the wide evaluation grid with per-method
/// (ssim, psnr) pairs.
#[derive(Clone, Debug)]
pub struct GridRow {
    pub sigma_b: f64,
    pub sigma_n: f64,
    pub input: (f64, f64),
    pub wiener: (f64, f64),
    pub rl: (f64, f64),
    pub lucyd: (f64, f64),
}

/// Writes the wide evaluation grid, one row per degradation cell with
/// method-major columns.
pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut out = String::from(
        "sigma_b,sigma_n,input_ssim,input_psnr,wiener_ssim,wiener_psnr,rl_ssim,rl_psnr,lucyd_ssim,lucyd_psnr\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            fmt_sig(r.sigma_b),
            fmt_sig(r.sigma_n),
            fmt_sig(r.input.0),
            fmt_sig(r.input.1),
            fmt_sig(r.wiener.0),
            fmt_sig(r.wiener.1),
            fmt_sig(r.rl.0),
            fmt_sig(r.rl.1),
            fmt_sig(r.lucyd.0),
            fmt_sig(r.lucyd.1)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

    fn random_volume(rng: &mut StdRng, c: usize, d: usize, h: usize, w: usize) -> Volume<f32> {
        Volume::from_vec(c, d, h, w, (0..c * d * h * w).map(|_| rng.random_range(-10.0..300.0)).collect())
            .unwrap()
    }

    #[test]
    fn lvol_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.lvol");
        let mut rng = StdRng::seed_from_u64(1);
        let v = random_volume(&mut rng, 2, 3, 4, 5);
        write_lvol(&path, &v).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = read_lvol(&path).unwrap();
        assert_eq!(loaded, v);
        write_lvol(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    /// Derives the expected file size from the format definition: padded
    /// header block plus four bytes per value.
    #[test]
    fn lvol_layout_matches_format_oracle() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.lvol");
        let v = Volume::<f32>::filled(1, 4, 6, 8, 1.5);
        write_lvol(&path, &v).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"LVOL");
        let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        assert_eq!((8 + header_len) % 16, 0, "payload must start 16-byte aligned");
        let json_len = serde_json::to_string(&LvolHeader {
            version: 1,
            dtype: "f32le".into(),
            axes: "CDHW".into(),
            shape: [1, 4, 6, 8],
        })
        .unwrap()
        .len();
        // Smallest padded length making 8 + len a multiple of 16.
        let mut padded = json_len;
        while (8 + padded) % 16 != 0 {
            padded += 1;
        }
        assert_eq!(header_len, padded);
        assert_eq!(bytes.len(), 8 + header_len + 4 * 4 * 6 * 8);
        let header_text = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
        assert!(header_text.trim_end().ends_with('}'), "padding must be trailing spaces only");
    }

    #[test]
    fn lvol_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.lvol");
        let v = Volume::<f32>::filled(1, 2, 2, 2, 1.0);
        write_lvol(&path, &v).unwrap();

        let good = std::fs::read(&path).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(read_lvol(&path).is_err());

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 3);
        std::fs::write(&path, &truncated).unwrap();
        assert!(read_lvol(&path).is_err());

        let mut short_payload = good.clone();
        short_payload.truncate(good.len() - 8);
        std::fs::write(&path, &short_payload).unwrap();
        assert!(read_lvol(&path).is_err(), "payload shorter than shape product must fail");
    }

    #[test]
    fn lckp_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        let tensors = vec![
            NamedTensor { name: "a.weight".into(), shape: vec![2, 1, 3, 3, 3], data: (0..54).map(|i| i as f32).collect() },
            NamedTensor { name: "a.bias".into(), shape: vec![2], data: vec![0.5, -0.5] },
        ];
        // Full-precision doubles exercise exact JSON float parsing: shortest
        // decimal forms of irregular f64 values must reparse to the same bits,
        // or save -> load -> save drifts by one ULP per generation.
        let config = serde_json::json!({
            "lr": 1e-3,
            "note": "unit",
            "history": [936225.5851898193, 0.30000000000000004, 1.0 / 3.0, -3.072767201491976e0],
            "pi15": std::f64::consts::PI * 1e15,
        });
        write_lckp(&path, &config, 7, &tensors).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (config2, epoch, loaded) = read_lckp(&path).unwrap();
        assert_eq!(config2, config);
        assert_eq!(epoch, 7);
        assert_eq!(loaded, tensors);
        write_lckp(&path, &config2, epoch, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        for (got, want) in config2["history"].as_array().unwrap().iter().zip([
            936225.5851898193f64,
            0.30000000000000004,
            1.0 / 3.0,
            -3.072767201491976,
        ]) {
            assert_eq!(got.as_f64().unwrap().to_bits(), want.to_bits());
        }
    }

    #[test]
    fn lckp_validates_tensor_spans() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.lckp");
        let bad = vec![NamedTensor { name: "t".into(), shape: vec![4], data: vec![0.0; 3] }];
        assert!(write_lckp(&path, &serde_json::json!({}), 0, &bad).is_err());

        // Hand-build a manifest whose tensor escapes the payload.
        let manifest = r#"{"version":1,"config":{},"epoch":0,"tensors":[{"name":"t","shape":[4],"byte_offset":0,"byte_len":16}]}"#;
        let header = pad_header(manifest.to_string());
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LCKP");
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // only 4 payload bytes
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_lckp(&path).is_err());
    }

    #[test]
    fn projections_match_brute_force() {
        let mut rng = StdRng::seed_from_u64(2);
        let v = random_volume(&mut rng, 1, 3, 4, 5);
        let (rows, cols, lat) = project_max(&v, ProjectionAxis::Lateral).unwrap();
        assert_eq!((rows, cols), (4, 5));
        for y in 0..4 {
            for x in 0..5 {
                let want = (0..3).map(|z| v.at(0, z, y, x)).fold(f32::NEG_INFINITY, f32::max);
                assert_eq!(lat[y * 5 + x], want);
            }
        }
        let (rows, cols, ax) = project_max(&v, ProjectionAxis::Axial).unwrap();
        assert_eq!((rows, cols), (3, 5));
        for z in 0..3 {
            for x in 0..5 {
                let want = (0..4).map(|y| v.at(0, z, y, x)).fold(f32::NEG_INFINITY, f32::max);
                assert_eq!(ax[z * 5 + x], want);
            }
        }
    }

    #[test]
    fn pgm_bytes_are_frozen_for_a_tiny_image() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("i.pgm");
        // min 0, max 4 → pixels scale to 0, 16384, 32768, 65535.
        write_pgm16(&path, 2, 2, &[0.0f32, 1.0, 2.0, 4.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut want = b"P5\n2 2\n65535\n".to_vec();
        for px in [0u16, 16384, 32768, 65535] {
            want.extend_from_slice(&px.to_be_bytes());
        }
        assert_eq!(bytes, want);
    }

    #[test]
    fn pgm_constant_image_is_all_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        write_pgm16(&path, 1, 3, &[2.5f32, 2.5, 2.5]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0u8; 6]);
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(fmt_sig(0.972512345), "0.972512");
        assert_eq!(fmt_sig(26.8523456), "26.8523");
        assert_eq!(fmt_sig(123456.7), "123457");
        assert_eq!(fmt_sig(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig(-3.25), "-3.25000");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
        assert_eq!(fmt_sig(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn metric_csv_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricRow {
            method: "rl".into(),
            sigma_b: 1.2,
            sigma_n: 15.0,
            ssim: 0.87654321,
            psnr: f64::INFINITY,
        }];
        write_metric_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "method,sigma_b,sigma_n,ssim,psnr\nrl,1.20000,15.0000,0.876543,inf\n");
    }

    #[test]
    fn grid_csv_has_method_major_columns() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let rows = vec![GridRow {
            sigma_b: 0.5,
            sigma_n: 20.0,
            input: (0.5, 20.0),
            wiener: (0.6, 21.0),
            rl: (0.7, 22.0),
            lucyd: (0.8, 23.0),
        }];
        write_grid_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sigma_b,sigma_n,input_ssim,input_psnr,wiener_ssim,wiener_psnr,rl_ssim,rl_psnr,lucyd_ssim,lucyd_psnr"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0.500000,20.0000,0.500000,20.0000,0.600000,21.0000,0.700000,22.0000,0.800000,23.0000"
        );
    }

    #[test]
    fn jsonl_appends_one_object_per_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        append_jsonl(&path, &serde_json::json!({"epoch": 0, "loss": 1.5})).unwrap();
        append_jsonl(&path, &serde_json::json!({"epoch": 1, "loss": 1.2})).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("epoch").is_some());
        }
    }
}
