//! Dataset directory layout.
//!
//! One directory per split holding, per sample, `<id>.pgm` (8-bit binary
//! graymap), `<id>.cls<k>.pbm` (binary bitmap, 1 = foreground) for every
//! class present, and `<id>.meta` with `key=value` lines: `domain`,
//! `overlap_rate`, `class<k>.position`, `class<k>.texture`,
//! `class<k>.shape`, `class<k>.area_fraction`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attributes::AttributeRecord;
use crate::image::ImageSample;
use crate::kv::KeyValues;
use crate::mask::Mask;
use crate::sample::{ClassAnnotation, SegSample};
use crate::DataError;

pub fn write_split(dir: &Path, samples: &[SegSample]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for s in samples {
        let id = s.id();
        write_file(&dir.join(format!("{id}.pgm")), &encode_pgm(&s.image)?)?;
        for c in &s.classes {
            write_file(&dir.join(format!("{id}.cls{}.pbm", c.class)), &encode_pbm(&c.mask))?;
        }
        write_file(&dir.join(format!("{id}.meta")), encode_meta(s).as_bytes())?;
    }
    Ok(())
}

/// Reads every sample of a split directory, ordered by id. An empty
/// directory yields an empty list.
pub fn read_split(dir: &Path) -> Result<Vec<SegSample>, DataError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "meta") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.iter().enumerate().map(|(i, id)| read_sample(dir, id, i)).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

fn read_sample(dir: &Path, id: &str, index: usize) -> Result<SegSample, DataError> {
    let meta_path = dir.join(format!("{id}.meta"));
    let rec_err = |file: &Path, msg: String| DataError::Record { file: file.to_path_buf(), index, msg };
    let text = fs::read_to_string(&meta_path).map_err(|e| DataError::io(&meta_path, e))?;
    let mut kv = KeyValues::parse(&text).map_err(|e| rec_err(&meta_path, e.to_string()))?;
    let classes: BTreeSet<usize> = kv
        .keys()
        .filter_map(|k| k.strip_prefix("class"))
        .filter_map(|k| k.split_once('.'))
        .map(|(n, _)| n.parse::<usize>().map_err(|_| rec_err(&meta_path, format!("bad class key 'class{n}'"))))
        .collect::<Result<_, _>>()?;
    let parse_meta = |kv: &mut KeyValues| -> Result<_, DataError> {
        let domain = kv.require::<String>("domain")?.parse()?;
        let overlap_rate: f64 = kv.require("overlap_rate")?;
        let mut annotations = Vec::new();
        for &k in &classes {
            let attributes = AttributeRecord {
                position: kv.require::<String>(&format!("class{k}.position"))?.parse()?,
                texture: kv.require::<String>(&format!("class{k}.texture"))?.parse()?,
                shape: kv.require::<String>(&format!("class{k}.shape"))?.parse()?,
            };
            let area_fraction: f64 = kv.require(&format!("class{k}.area_fraction"))?;
            annotations.push((k, attributes, area_fraction));
        }
        Ok((domain, overlap_rate, annotations))
    };
    let (domain, overlap_rate, annotations) = parse_meta(&mut kv).map_err(|e| rec_err(&meta_path, e.to_string()))?;
    kv.finish().map_err(|e| rec_err(&meta_path, e.to_string()))?;

    let img_path = dir.join(format!("{id}.pgm"));
    let bytes = fs::read(&img_path).map_err(|e| DataError::io(&img_path, e))?;
    let image = decode_pgm(id, &bytes).map_err(|e| rec_err(&img_path, e.to_string()))?;

    let mut classes_out = Vec::new();
    for (k, attributes, area_fraction) in annotations {
        let mask_path = dir.join(format!("{id}.cls{k}.pbm"));
        let bytes = fs::read(&mask_path).map_err(|e| DataError::io(&mask_path, e))?;
        let mask = decode_pbm(&bytes).map_err(|e| rec_err(&mask_path, e.to_string()))?;
        if mask.height() != image.height || mask.width() != image.width {
            return Err(rec_err(&mask_path, "mask and image sizes differ".into()));
        }
        classes_out.push(ClassAnnotation { class: k, mask, attributes, area_fraction });
    }
    Ok(SegSample { image, classes: classes_out, domain, overlap_rate })
}

fn encode_meta(s: &SegSample) -> String {
    let mut out = format!("domain={}\noverlap_rate={}\n", s.domain, s.overlap_rate);
    for c in &s.classes {
        let k = c.class;
        out.push_str(&format!(
            "class{k}.position={}\nclass{k}.texture={}\nclass{k}.shape={}\nclass{k}.area_fraction={}\n",
            c.attributes.position, c.attributes.texture, c.attributes.shape, c.area_fraction
        ));
    }
    out
}

/// Binary PGM with maxval 255. Pixels must be integers in [0, 255].
pub fn encode_pgm(img: &ImageSample) -> Result<Vec<u8>, DataError> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for &v in &img.pixels {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(DataError::Shape(format!("pixel {v} is not an 8-bit integer")));
        }
        out.push(v as u8);
    }
    Ok(out)
}

/// Binary PBM, rows padded to whole bytes, most significant bit first.
pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = w.div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if mask.get(y, x) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

/// Splits a netpbm header into `count` numeric fields and returns them with
/// the offset of the raster.
fn header_fields(bytes: &[u8], magic: &[u8], count: usize) -> Result<(Vec<usize>, usize), DataError> {
    if !bytes.starts_with(magic) {
        return Err(DataError::Parse(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = Vec::new();
    while fields.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Parse("truncated header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields.push(s.parse().map_err(|_| DataError::Parse(format!("bad header field '{s}'")))?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::Parse("truncated header".into()));
    }
    Ok((fields, pos + 1))
}

pub fn decode_pgm(id: &str, bytes: &[u8]) -> Result<ImageSample, DataError> {
    let (f, start) = header_fields(bytes, b"P5", 3)?;
    let (w, h, maxval) = (f[0], f[1], f[2]);
    if maxval != 255 {
        return Err(DataError::Parse(format!("unsupported maxval {maxval}")));
    }
    let raster = &bytes[start..];
    if raster.len() < w * h {
        return Err(DataError::Parse(format!("raster has {} of {} bytes", raster.len(), w * h)));
    }
    let pixels = raster[..w * h].iter().map(|&b| b as f64).collect();
    Ok(ImageSample { id: id.to_string(), height: h, width: w, pixels })
}

pub fn decode_pbm(bytes: &[u8]) -> Result<Mask, DataError> {
    let (f, start) = header_fields(bytes, b"P4", 2)?;
    let (w, h) = (f[0], f[1]);
    let row_bytes = w.div_ceil(8);
    let raster = &bytes[start..];
    if raster.len() < row_bytes * h {
        return Err(DataError::Parse(format!("raster has {} of {} bytes", raster.len(), row_bytes * h)));
    }
    let mut mask = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if raster[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0 {
                mask.set(y, x, true);
            }
        }
    }
    Ok(mask)
}

/// `<root>/<split>` for the conventional split names.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}
