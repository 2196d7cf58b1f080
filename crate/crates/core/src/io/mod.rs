//! Files: tensor checkpoints, PGM/PPM images, key=value configs and run
//! manifests. Every write goes to a temporary sibling first and is renamed
//! into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::NamedTensorSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GKC1";
pub const TENSOR_MAGIC: &[u8; 4] = b"GKT1";

/// Writes `bytes` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let too_big = |what: &str| Error::contract(format!("{what} of {name:?} does not fit the format"));
    out.extend_from_slice(&u32::try_from(name.len()).map_err(|_| too_big("name"))?.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(t.ndim()).map_err(|_| too_big("rank"))?);
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expect {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expect)
                ),
            ));
        }
        Ok(())
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let start = self.pos as u64;
        let len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::format(start + 4, "entry name is not UTF-8"))?
            .to_owned();
        let ndim = self.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let at = self.pos as u64;
            let d = self.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, format!("zero dimension in {name:?}")));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::format(at, "element count overflows"))?;
            shape.push(d);
        }
        let at = self.pos;
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(at as u64, "element count overflows"))?;
        let raw = self.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(start, e.to_string()))?;
        Ok((name, t))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos as u64, "trailing bytes after last entry"));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(set: &NamedTensorSet) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    let n = u32::try_from(set.len()).map_err(|_| Error::contract("too many checkpoint entries"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for (name, t) in set.iter() {
        encode_entry(&mut out, name, t)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensorSet> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let n = r.u32("entry count")?;
    let mut set = NamedTensorSet::new();
    for _ in 0..n {
        let at = r.pos as u64;
        let (name, t) = r.entry()?;
        set.insert(name, t).map_err(|e| Error::format(at, e.to_string()))?;
    }
    r.finish()?;
    Ok(set)
}

pub fn save_checkpoint(path: &Path, set: &NamedTensorSet) -> Result<()> {
    write_atomic(path, &encode_checkpoint(set)?)
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensorSet> {
    decode_checkpoint(&read_file(path)?)
}

/// Single named tensor in the `GKT1` layout.
pub fn encode_tensor(name: &str, t: &Tensor) -> Result<Vec<u8>> {
    let mut out = TENSOR_MAGIC.to_vec();
    encode_entry(&mut out, name, t)?;
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(String, Tensor)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(TENSOR_MAGIC)?;
    let e = r.entry()?;
    r.finish()?;
    Ok(e)
}

pub fn save_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(name, t)?)
}

pub fn load_tensor(path: &Path) -> Result<(String, Tensor)> {
    decode_tensor(&read_file(path)?)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<(usize, String)> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(start as u64, "truncated image header"));
    }
    Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let (at, tok) = header_token(bytes, pos)?;
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(at as u64, format!("bad {what} {tok:?}"))),
    }
}

/// Decodes binary PGM (`P5`, grayscale → `[H, W]`) or PPM (`P6`, color →
/// `[3, H, W]`) with maxval 255 into values in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let (_, magic) = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(Error::format(0, format!("unsupported image magic {magic:?}, expected P5 or P6"))),
    };
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at as u64, format!("maxval {maxval} is not 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(pos as u64, "missing separator after header"));
    }
    pos += 1;
    let n = channels * h * w;
    if bytes.len() - pos != n {
        return Err(Error::format(
            pos as u64,
            format!("expected {n} pixel bytes, found {}", bytes.len() - pos),
        ));
    }
    let px = &bytes[pos..];
    if channels == 1 {
        Tensor::new(vec![h, w], px.iter().map(|&b| b as f64 / 255.0).collect())
    } else {
        // interleaved RGB → planar
        let mut data = vec![0.0; n];
        for (i, &b) in px.iter().enumerate() {
            data[(i % 3) * h * w + i / 3] = b as f64 / 255.0;
        }
        Tensor::new(vec![3, h, w], data)
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    match *img.shape() {
        [h, w] => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(img.data().iter().map(|&v| quantize(v)));
            Ok(out)
        }
        [3, h, w] => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            for p in 0..h * w {
                for c in 0..3 {
                    out.push(quantize(img.data()[c * h * w + p]));
                }
            }
            Ok(out)
        }
        _ => Err(Error::dim("write_image", img.shape(), &[0, 0])),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&read_file(path)?)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    write_atomic(path, &encode_image(img)?)
}

/// Flat `key=value` settings. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `text`, rejecting keys not listed in `known`.
    pub fn parse(text: &str, known: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !known.contains(&k) {
                return Err(Error::Config(format!("unknown key {k:?} on line {}", n + 1)));
            }
            if values.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(Error::Config(format!("duplicate key {k:?} on line {}", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path, known: &[&str]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, known)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parsed value of `key`, if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("cannot parse {key}={v:?}")))
            })
            .transpose()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.values.insert(key.into(), value.to_string());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Writes a run manifest: `# comment` header lines, then the settings.
pub fn write_manifest(path: &Path, header: &[String], config: &RunConfig) -> Result<()> {
    let mut text: String = header.iter().map(|h| format!("# {h}\n")).collect();
    text.push_str(&config.to_text());
    write_atomic(path, text.as_bytes())
}

/// Path of the manifest written next to an output.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        return output.join("manifest.txt");
    }
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    output.with_file_name(name)
}
