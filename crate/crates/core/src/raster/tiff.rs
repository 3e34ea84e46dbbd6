//! Classic little-endian, uncompressed, strip-organized TIFF.
//!
//! Writes interleaved (chunky) samples with one IFD. Reads both chunky and
//! planar layouts; anything outside that subset is reported by tag.

use std::fs;
use std::path::{Path, PathBuf};

use super::{RasterError, RasterTile, Result, SampleFormat, Samples};

const IMAGE_WIDTH: u16 = 256;
const IMAGE_LENGTH: u16 = 257;
const BITS_PER_SAMPLE: u16 = 258;
const COMPRESSION: u16 = 259;
const PHOTOMETRIC: u16 = 262;
const STRIP_OFFSETS: u16 = 273;
const SAMPLES_PER_PIXEL: u16 = 277;
const ROWS_PER_STRIP: u16 = 278;
const STRIP_BYTE_COUNTS: u16 = 279;
const PLANAR_CONFIG: u16 = 284;
const PREDICTOR: u16 = 317;
const TILE_WIDTH: u16 = 322;
const EXTRA_SAMPLES: u16 = 338;
const SAMPLE_FORMAT: u16 = 339;

const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;

fn type_size(t: u16) -> Option<usize> {
    match t {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 | 13 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes(&self, off: usize, len: usize, what: &str) -> Result<&[u8]> {
        off.checked_add(len)
            .and_then(|end| self.buf.get(off..end))
            .ok_or_else(|| RasterError::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} at offset {off} needs {len} bytes, file has {}", self.buf.len()),
            })
    }

    fn u16(&self, off: usize, what: &str) -> Result<u16> {
        let b = self.bytes(off, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, off: usize, what: &str) -> Result<u32> {
        let b = self.bytes(off, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Entry {
    tag: u16,
    typ: u16,
    count: usize,
    /// Offset of the value bytes within the file.
    value_at: usize,
}

impl Entry {
    fn values(&self, r: &Reader) -> Result<Vec<u32>> {
        (0..self.count)
            .map(|i| match self.typ {
                TYPE_SHORT => r.u16(self.value_at + 2 * i, "tag value").map(u32::from),
                TYPE_LONG => r.u32(self.value_at + 4 * i, "tag value"),
                1 => r.bytes(self.value_at + i, 1, "tag value").map(|b| u32::from(b[0])),
                t => Err(RasterError::Malformed {
                    path: r.path.to_path_buf(),
                    detail: format!("tag {} has non-integer field type {t}", self.tag),
                }),
            })
            .collect()
    }
}

fn unsupported(path: &Path, feature: String) -> RasterError {
    RasterError::Unsupported {
        path: path.to_path_buf(),
        feature,
    }
}

fn malformed(path: &Path, detail: impl Into<String>) -> RasterError {
    RasterError::Malformed {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn read_tiff(path: impl AsRef<Path>) -> Result<RasterTile> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| malformed(path, "file name has no UTF-8 stem"))?
        .to_string();
    decode(&buf, path, name)
}

fn decode(buf: &[u8], path: &Path, name: String) -> Result<RasterTile> {
    let r = Reader { buf, path };
    let order = r.bytes(0, 2, "byte-order mark")?;
    match order {
        b"II" => {}
        b"MM" => return Err(unsupported(path, "big-endian byte order (MM)".into())),
        _ => return Err(malformed(path, "missing II/MM byte-order mark")),
    }
    match r.u16(2, "magic")? {
        42 => {}
        43 => return Err(unsupported(path, "BigTIFF (version 43)".into())),
        v => return Err(malformed(path, format!("bad magic {v}"))),
    }
    let ifd = r.u32(4, "IFD offset")? as usize;
    let n_entries = r.u16(ifd, "IFD entry count")? as usize;

    let mut entries = Vec::with_capacity(n_entries);
    for i in 0..n_entries {
        let at = ifd + 2 + 12 * i;
        let tag = r.u16(at, "IFD entry")?;
        let typ = r.u16(at + 2, "IFD entry")?;
        let count = r.u32(at + 4, "IFD entry")? as usize;
        let Some(size) = type_size(typ) else {
            // unknown field types are skippable per baseline rules
            continue;
        };
        let value_at = if size * count <= 4 {
            at + 8
        } else {
            r.u32(at + 8, "IFD entry")? as usize
        };
        entries.push(Entry {
            tag,
            typ,
            count,
            value_at,
        });
    }
    let find = |tag: u16| entries.iter().find(|e| e.tag == tag);
    let scalar = |tag: u16, default: Option<u32>| -> Result<u32> {
        match find(tag) {
            Some(e) => e
                .values(&r)?
                .first()
                .copied()
                .ok_or_else(|| malformed(path, format!("tag {tag} has no value"))),
            None => default.ok_or_else(|| malformed(path, format!("missing required tag {tag}"))),
        }
    };

    if find(TILE_WIDTH).is_some() {
        return Err(unsupported(path, format!("tiled layout (tag {TILE_WIDTH} TileWidth)")));
    }
    let compression = scalar(COMPRESSION, Some(1))?;
    if compression != 1 {
        let what = match compression {
            5 => " (LZW)",
            6 | 7 => " (JPEG)",
            8 | 32946 => " (Deflate)",
            32773 => " (PackBits)",
            _ => "",
        };
        return Err(unsupported(
            path,
            format!("tag {COMPRESSION} Compression = {compression}{what}"),
        ));
    }
    let predictor = scalar(PREDICTOR, Some(1))?;
    if predictor != 1 {
        return Err(unsupported(path, format!("tag {PREDICTOR} Predictor = {predictor}")));
    }
    let photometric = scalar(PHOTOMETRIC, Some(1))?;
    if !matches!(photometric, 0 | 1 | 2) {
        return Err(unsupported(
            path,
            format!("tag {PHOTOMETRIC} PhotometricInterpretation = {photometric}"),
        ));
    }

    let width = scalar(IMAGE_WIDTH, None)? as usize;
    let height = scalar(IMAGE_LENGTH, None)? as usize;
    let spp = scalar(SAMPLES_PER_PIXEL, Some(1))? as usize;
    if !(1..=4).contains(&spp) {
        return Err(unsupported(path, format!("tag {SAMPLES_PER_PIXEL} SamplesPerPixel = {spp}")));
    }
    let bits = match find(BITS_PER_SAMPLE) {
        Some(e) => e.values(&r)?,
        None => vec![1],
    };
    let fmts = match find(SAMPLE_FORMAT) {
        Some(e) => e.values(&r)?,
        None => vec![1],
    };
    let (b0, f0) = (bits[0], fmts[0]);
    if bits.iter().any(|b| *b != b0) || fmts.iter().any(|f| *f != f0) {
        return Err(unsupported(path, "mixed per-band sample formats".into()));
    }
    let format = match (b0, f0) {
        (8, 1) => SampleFormat::U8,
        (16, 1) => SampleFormat::U16,
        (32, 3) => SampleFormat::F32,
        _ => {
            return Err(unsupported(
                path,
                format!("tags {BITS_PER_SAMPLE}/{SAMPLE_FORMAT} BitsPerSample={b0} SampleFormat={f0}"),
            ))
        }
    };
    let planar = scalar(PLANAR_CONFIG, Some(1))?;
    if !matches!(planar, 1 | 2) {
        return Err(malformed(path, format!("PlanarConfiguration = {planar}")));
    }
    let rows_per_strip = (scalar(ROWS_PER_STRIP, Some(u32::MAX))? as usize).min(height).max(1);
    let offsets = find(STRIP_OFFSETS)
        .ok_or_else(|| malformed(path, "missing StripOffsets"))?
        .values(&r)?;
    let counts = find(STRIP_BYTE_COUNTS)
        .ok_or_else(|| malformed(path, "missing StripByteCounts"))?
        .values(&r)?;
    if offsets.len() != counts.len() {
        return Err(malformed(path, "StripOffsets/StripByteCounts length mismatch"));
    }

    let mut raw = Vec::with_capacity(width * height * spp * (b0 as usize / 8));
    for (off, cnt) in offsets.iter().zip(&counts) {
        raw.extend_from_slice(r.bytes(*off as usize, *cnt as usize, "strip data")?);
    }
    let bps = b0 as usize / 8;
    let need = width * height * spp * bps;
    let strips_per_plane = height.div_ceil(rows_per_strip);
    let expected_strips = if planar == 2 { strips_per_plane * spp } else { strips_per_plane };
    if raw.len() < need || offsets.len() != expected_strips {
        return Err(RasterError::Truncated {
            path: path.to_path_buf(),
            detail: format!("strip data holds {} bytes, image needs {need}", raw.len()),
        });
    }
    raw.truncate(need);

    // reorder to band-sequential
    let n = width * height;
    let src_index = |band: usize, px: usize| {
        if planar == 1 {
            px * spp + band
        } else {
            band * n + px
        }
    };
    let samples = match format {
        SampleFormat::U8 => Samples::U8(
            (0..spp)
                .flat_map(|b| (0..n).map(move |p| (b, p)))
                .map(|(b, p)| raw[src_index(b, p)])
                .collect(),
        ),
        SampleFormat::U16 => Samples::U16(
            (0..spp)
                .flat_map(|b| (0..n).map(move |p| (b, p)))
                .map(|(b, p)| {
                    let i = 2 * src_index(b, p);
                    u16::from_le_bytes([raw[i], raw[i + 1]])
                })
                .collect(),
        ),
        SampleFormat::F32 => Samples::F32(
            (0..spp)
                .flat_map(|b| (0..n).map(move |p| (b, p)))
                .map(|(b, p)| {
                    let i = 4 * src_index(b, p);
                    f32::from_le_bytes([raw[i], raw[i + 1], raw[i + 2], raw[i + 3]])
                })
                .collect(),
        ),
    };
    RasterTile::new(name, width, height, spp, samples)
}

/// Serializes `tile` to the TIFF subset [`read_tiff`] accepts. The file is
/// written next to `path` and renamed into place.
pub fn write_tiff(tile: &RasterTile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tile);
    let tmp: PathBuf = {
        let mut s = path.as_os_str().to_owned();
        s.push(".tmp");
        s.into()
    };
    let io = |source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub(crate) fn encode(tile: &RasterTile) -> Vec<u8> {
    let (w, h, spp) = (tile.width(), tile.height(), tile.bands());
    let fmt = tile.sample_format();
    let bps = fmt.bits() as usize / 8;
    let row_bytes = w * spp * bps;
    let rows_per_strip = (65536 / row_bytes).clamp(1, h);
    let n_strips = h.div_ceil(rows_per_strip);

    // chunky pixel data
    let n = w * h;
    let mut pixels = Vec::with_capacity(n * spp * bps);
    for p in 0..n {
        for b in 0..spp {
            let i = b * n + p;
            match tile.samples() {
                Samples::U8(v) => pixels.push(v[i]),
                Samples::U16(v) => pixels.extend_from_slice(&v[i].to_le_bytes()),
                Samples::F32(v) => pixels.extend_from_slice(&v[i].to_le_bytes()),
            }
        }
    }

    let rgb = spp >= 3 && fmt == SampleFormat::U8;
    let photometric: u32 = if rgb { 2 } else { 1 };
    let color_channels = if rgb { 3 } else { 1 };
    let extra = spp - color_channels;
    let sample_format: u32 = if fmt == SampleFormat::F32 { 3 } else { 1 };

    // (tag, type, values)
    let mut tags: Vec<(u16, u16, Vec<u32>)> = vec![
        (IMAGE_WIDTH, TYPE_LONG, vec![w as u32]),
        (IMAGE_LENGTH, TYPE_LONG, vec![h as u32]),
        (BITS_PER_SAMPLE, TYPE_SHORT, vec![fmt.bits() as u32; spp]),
        (COMPRESSION, TYPE_SHORT, vec![1]),
        (PHOTOMETRIC, TYPE_SHORT, vec![photometric]),
        (STRIP_OFFSETS, TYPE_LONG, vec![0; n_strips]),
        (SAMPLES_PER_PIXEL, TYPE_SHORT, vec![spp as u32]),
        (ROWS_PER_STRIP, TYPE_LONG, vec![rows_per_strip as u32]),
        (
            STRIP_BYTE_COUNTS,
            TYPE_LONG,
            (0..n_strips)
                .map(|s| ((rows_per_strip.min(h - s * rows_per_strip)) * row_bytes) as u32)
                .collect(),
        ),
        (PLANAR_CONFIG, TYPE_SHORT, vec![1]),
    ];
    if extra > 0 {
        tags.push((EXTRA_SAMPLES, TYPE_SHORT, vec![0; extra]));
    }
    tags.push((SAMPLE_FORMAT, TYPE_SHORT, vec![sample_format; spp]));

    let ifd_at = 8usize;
    let ifd_len = 2 + 12 * tags.len() + 4;
    let value_size = |typ: u16, count: usize| if typ == TYPE_SHORT { 2 * count } else { 4 * count };
    let mut overflow_at = ifd_at + ifd_len;
    let mut overflow_offsets = Vec::with_capacity(tags.len());
    for (_, typ, vals) in &tags {
        let sz = value_size(*typ, vals.len());
        if sz > 4 {
            overflow_offsets.push(Some(overflow_at));
            overflow_at += sz + (sz & 1);
        } else {
            overflow_offsets.push(None);
        }
    }
    let data_at = overflow_at;
    let strip_bytes = rows_per_strip * row_bytes;
    if let Some((_, _, offs)) = tags.iter_mut().find(|t| t.0 == STRIP_OFFSETS) {
        for (s, o) in offs.iter_mut().enumerate() {
            *o = (data_at + s * strip_bytes) as u32;
        }
    }

    let mut out = Vec::with_capacity(data_at + pixels.len());
    out.extend_from_slice(b"II");
    out.extend_from_slice(&42u16.to_le_bytes());
    out.extend_from_slice(&(ifd_at as u32).to_le_bytes());
    out.extend_from_slice(&(tags.len() as u16).to_le_bytes());
    let put = |buf: &mut Vec<u8>, typ: u16, vals: &[u32]| {
        for v in vals {
            if typ == TYPE_SHORT {
                buf.extend_from_slice(&(*v as u16).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    for ((tag, typ, vals), ov) in tags.iter().zip(&overflow_offsets) {
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&typ.to_le_bytes());
        out.extend_from_slice(&(vals.len() as u32).to_le_bytes());
        match ov {
            Some(at) => out.extend_from_slice(&(*at as u32).to_le_bytes()),
            None => {
                let mut inline = Vec::with_capacity(4);
                put(&mut inline, *typ, vals);
                inline.resize(4, 0);
                out.extend_from_slice(&inline);
            }
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    for ((_, typ, vals), ov) in tags.iter().zip(&overflow_offsets) {
        if ov.is_some() {
            put(&mut out, *typ, vals);
            if out.len() % 2 == 1 {
                out.push(0);
            }
        }
    }
    debug_assert_eq!(out.len(), data_at);
    out.extend_from_slice(&pixels);
    out
}
