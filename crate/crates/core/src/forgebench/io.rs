//! Dataset records and the on-disk layout: binary PPM images, binary PGM
//! masks (0/255), and a tab-separated index with fixed column order
//! (id, image path, label, mask path, family, split).

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::real::{lit, Real};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Authentic,
    Forged,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Authentic => "authentic",
            Label::Forged => "forged",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "authentic" => Ok(Label::Authentic),
            "forged" => Ok(Label::Forged),
            _ => Err(Error::data(format!("unknown label {s:?}"))),
        }
    }
    pub fn as_u8(self) -> u8 {
        matches!(self, Label::Forged) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    CopyMove,
    Splice,
    NoiseInpaint,
    BlurPatch,
    None,
}

pub const FORGERY_FAMILIES: [Family; 4] =
    [Family::CopyMove, Family::Splice, Family::NoiseInpaint, Family::BlurPatch];

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::CopyMove => "copy-move",
            Family::Splice => "splice",
            Family::NoiseInpaint => "noise-inpaint",
            Family::BlurPatch => "blur-patch",
            Family::None => "none",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy-move" => Ok(Family::CopyMove),
            "splice" => Ok(Family::Splice),
            "noise-inpaint" => Ok(Family::NoiseInpaint),
            "blur-patch" => Ok(Family::BlurPatch),
            "none" => Ok(Family::None),
            _ => Err(Error::data(format!("unknown forgery family {s:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    TestOod,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestOod => "test-ood",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test-ood" => Ok(Split::TestOod),
            _ => Err(Error::data(format!("unknown split {s:?}"))),
        }
    }
}

/// One dataset entry, fully in memory. Image planes are u8; `image_tensor`
/// converts to [0,1] floats.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub h: usize,
    pub w: usize,
    /// RGB, plane-major (3·h·w).
    pub image: Vec<u8>,
    pub label: Label,
    /// 0/1 per pixel.
    pub mask: Vec<u8>,
    pub family: Family,
    pub split: Split,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image.len() != 3 * self.h * self.w || self.mask.len() != self.h * self.w {
            return Err(Error::data(format!("sample {}: buffer sizes mismatch dims", self.id)));
        }
        let forged_pixels = self.mask.iter().filter(|&&m| m != 0).count();
        let ok = match self.label {
            Label::Authentic => forged_pixels == 0 && self.family == Family::None,
            Label::Forged => forged_pixels >= 1 && self.family != Family::None,
        };
        if !ok {
            return Err(Error::data(format!(
                "sample {}: label/mask/family invariant violated ({} forged pixels, family {})",
                self.id, forged_pixels, self.family
            )));
        }
        Ok(())
    }

    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::raw(
            vec![3, self.h, self.w],
            self.image.iter().map(|&b| lit::<T>(b as f64 / 255.0)).collect(),
        )
    }

    pub fn forged_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / (self.h * self.w) as f64
    }
}

// ── PPM / PGM ───────────────────────────────────────────────────────────

/// Write a binary P6 PPM from plane-major RGB bytes.
pub fn write_ppm(path: &Path, h: usize, w: usize, planes: &[u8]) -> Result<()> {
    debug_assert_eq!(planes.len(), 3 * h * w);
    let f = fs::File::create(path)?;
    let mut out = BufWriter::new(f);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        buf.push(planes[i]);
        buf.push(planes[hw + i]);
        buf.push(planes[2 * hw + i]);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path)?;
    let (h, w, data) = parse_netpbm(&raw, b"P6", path)?;
    let hw = h * w;
    if data.len() != 3 * hw {
        return Err(Error::data(format!("{}: truncated pixel data", path.display())));
    }
    let mut planes = vec![0u8; 3 * hw];
    for i in 0..hw {
        planes[i] = data[3 * i];
        planes[hw + i] = data[3 * i + 1];
        planes[2 * hw + i] = data[3 * i + 2];
    }
    Ok((h, w, planes))
}

/// Write a binary P5 PGM with 0/255 values from a 0/1 mask.
pub fn write_pgm(path: &Path, h: usize, w: usize, mask: &[u8]) -> Result<()> {
    debug_assert_eq!(mask.len(), h * w);
    let f = fs::File::create(path)?;
    let mut out = BufWriter::new(f);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let buf: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path)?;
    let (h, w, data) = parse_netpbm(&raw, b"P5", path)?;
    if data.len() != h * w {
        return Err(Error::data(format!("{}: truncated mask data", path.display())));
    }
    Ok((h, w, data.iter().map(|&b| (b >= 128) as u8).collect()))
}

fn parse_netpbm<'a>(raw: &'a [u8], magic: &[u8], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    if raw.len() < 2 || &raw[..2] != magic {
        return Err(Error::data(format!("{}: not a {} file", path.display(), String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(format!("{}: malformed header", path.display())));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::data(format!("{}: malformed header", path.display())))?;
    }
    if fields[2] != 255 {
        return Err(Error::data(format!("{}: only maxval 255 supported", path.display())));
    }
    // Single whitespace byte after maxval.
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    Ok((h, w, &raw[pos..]))
}

// ── dataset directory ───────────────────────────────────────────────────

pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s: Split| self.records.iter().filter(|r| r.split == s).count();
        (c(Split::Train), c(Split::Val), c(Split::TestOod))
    }
}

/// Write records under `root`: images/*.ppm, masks/*.pgm, index.tsv.
pub fn write_dataset(root: &Path, records: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut index = BufWriter::new(fs::File::create(root.join("index.tsv"))?);
    for r in records {
        r.validate()?;
        let img_rel = format!("images/{}.ppm", r.id);
        let mask_rel = format!("masks/{}.pgm", r.id);
        write_ppm(&root.join(&img_rel), r.h, r.w, &r.image)?;
        write_pgm(&root.join(&mask_rel), r.h, r.w, &r.mask)?;
        writeln!(
            index,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            img_rel,
            r.label.as_str(),
            mask_rel,
            r.family.as_str(),
            r.split.as_str()
        )?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let index_path = root.join("index.tsv");
    let mut text = String::new();
    fs::File::open(&index_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", index_path.display())))?
        .read_to_string(&mut text)?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::data(format!("index.tsv line {}: expected 6 columns", ln + 1)));
        }
        let (ih, iw, image) = read_ppm(&root.join(cols[1]))?;
        let (mh, mw, mask) = read_pgm(&root.join(cols[3]))?;
        if (ih, iw) != (mh, mw) {
            return Err(Error::data(format!("sample {}: image/mask dims differ", cols[0])));
        }
        let rec = SampleRecord {
            id: cols[0].to_string(),
            h: ih,
            w: iw,
            image,
            label: Label::parse(cols[2])?,
            mask,
            family: Family::parse(cols[4])?,
            split: Split::parse(cols[5])?,
        };
        rec.validate()?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::data(format!("{}: empty dataset", root.display())));
    }
    Ok(Dataset { root: root.to_path_buf(), records })
}
