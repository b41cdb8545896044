//! GeoTIFF codec for single-image, uncompressed, striped files.
//!
//! Writes little-endian classic TIFF with 32-bit float samples in planar
//! (band-separate) layout, the GDAL nodata ASCII tag and an EPSG:4326
//! tiepoint/pixel-scale georeference. Band names and free-form metadata
//! travel as JSON in `ImageDescription`. The reader also accepts chunky
//! layouts, big-endian files and 8/16/32-bit integer or 64-bit float
//! samples, converting everything to `f32`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Cursor, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GeoTransform, Raster, RasterError};

const IMAGE_WIDTH: u16 = 256;
const IMAGE_LENGTH: u16 = 257;
const BITS_PER_SAMPLE: u16 = 258;
const COMPRESSION: u16 = 259;
const PHOTOMETRIC: u16 = 262;
const IMAGE_DESCRIPTION: u16 = 270;
const STRIP_OFFSETS: u16 = 273;
const SAMPLES_PER_PIXEL: u16 = 277;
const ROWS_PER_STRIP: u16 = 278;
const STRIP_BYTE_COUNTS: u16 = 279;
const PLANAR_CONFIGURATION: u16 = 284;
const TILE_WIDTH: u16 = 322;
const EXTRA_SAMPLES: u16 = 338;
const SAMPLE_FORMAT: u16 = 339;
const MODEL_PIXEL_SCALE: u16 = 33550;
const MODEL_TIEPOINT: u16 = 33922;
const GEO_KEY_DIRECTORY: u16 = 34735;
const GDAL_NODATA: u16 = 42113;

const TARGET_STRIP_BYTES: usize = 64 * 1024;

/// Everything in a GeoTIFF except the pixel payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub band_names: Vec<String>,
    pub nodata: f32,
    pub geo: GeoTransform,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Description {
    bands: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

enum Value {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Ascii(String),
    Double(Vec<f64>),
}

impl Value {
    fn type_and_count(&self) -> (u16, usize) {
        match self {
            Value::Short(v) => (3, v.len()),
            Value::Long(v) => (4, v.len()),
            Value::Ascii(s) => (2, s.len() + 1),
            Value::Double(v) => (12, v.len()),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Value::Short(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Long(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Ascii(s) => s.bytes().chain(std::iter::once(0)).collect(),
            Value::Double(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

fn format_nodata(v: f32) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        v.to_string()
    }
}

pub fn encode_geotiff(r: &Raster) -> Result<Vec<u8>, RasterError> {
    let (w, h, n) = (r.width(), r.height(), r.bands().len());
    if n == 0 {
        return Err(RasterError::UnsupportedLayout("raster has no bands".into()));
    }
    let data_len = w * h * n * 4;
    if data_len > (u32::MAX as usize) / 2 {
        return Err(RasterError::UnsupportedLayout("raster too large for classic TIFF".into()));
    }
    let rows_per_strip = (TARGET_STRIP_BYTES / (w * 4)).clamp(1, h);
    let strips_per_band = h.div_ceil(rows_per_strip);

    let mut offsets = Vec::with_capacity(n * strips_per_band);
    let mut counts = Vec::with_capacity(n * strips_per_band);
    for b in 0..n {
        for s in 0..strips_per_band {
            let first_row = s * rows_per_strip;
            let rows = rows_per_strip.min(h - first_row);
            offsets.push((8 + (b * h * w + first_row * w) * 4) as u32);
            counts.push((rows * w * 4) as u32);
        }
    }

    let description = serde_json::to_string(&Description {
        bands: r.band_names().iter().map(|s| s.to_string()).collect(),
        metadata: r.metadata().clone(),
    })
    .expect("description serializes");
    let geo = r.geo();

    let mut entries: Vec<(u16, Value)> = vec![
        (IMAGE_WIDTH, Value::Long(vec![w as u32])),
        (IMAGE_LENGTH, Value::Long(vec![h as u32])),
        (BITS_PER_SAMPLE, Value::Short(vec![32; n])),
        (COMPRESSION, Value::Short(vec![1])),
        (PHOTOMETRIC, Value::Short(vec![1])),
        (IMAGE_DESCRIPTION, Value::Ascii(description)),
        (STRIP_OFFSETS, Value::Long(offsets)),
        (SAMPLES_PER_PIXEL, Value::Short(vec![n as u16])),
        (ROWS_PER_STRIP, Value::Long(vec![rows_per_strip as u32])),
        (STRIP_BYTE_COUNTS, Value::Long(counts)),
        (PLANAR_CONFIGURATION, Value::Short(vec![if n > 1 { 2 } else { 1 }])),
        (SAMPLE_FORMAT, Value::Short(vec![3; n])),
        (MODEL_PIXEL_SCALE, Value::Double(vec![geo.pixel_lon_deg, geo.pixel_lat_deg, 0.0])),
        (MODEL_TIEPOINT, Value::Double(vec![0.0, 0.0, 0.0, geo.origin_lon, geo.origin_lat, 0.0])),
        (
            GEO_KEY_DIRECTORY,
            Value::Short(vec![1, 1, 0, 3, 1024, 0, 1, 2, 1025, 0, 1, 1, 2048, 0, 1, 4326]),
        ),
        (GDAL_NODATA, Value::Ascii(format_nodata(r.nodata()))),
    ];
    if n > 1 {
        entries.push((EXTRA_SAMPLES, Value::Short(vec![0; n - 1])));
    }
    entries.sort_by_key(|(tag, _)| *tag);

    let ifd_offset = 8 + data_len;
    let ifd_len = 2 + entries.len() * 12 + 4;
    let mut out = Vec::with_capacity(ifd_offset + ifd_len + 1024);
    out.extend_from_slice(b"II");
    out.extend_from_slice(&42u16.to_le_bytes());
    out.extend_from_slice(&(ifd_offset as u32).to_le_bytes());
    for band in r.bands() {
        for v in &band.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), ifd_offset);

    let mut overflow: Vec<u8> = Vec::new();
    let overflow_base = ifd_offset + ifd_len;
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (tag, value) in &entries {
        let (typ, count) = value.type_and_count();
        let bytes = value.bytes();
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&typ.to_le_bytes());
        out.extend_from_slice(&(count as u32).to_le_bytes());
        if bytes.len() <= 4 {
            let mut inline = [0u8; 4];
            inline[..bytes.len()].copy_from_slice(&bytes);
            out.extend_from_slice(&inline);
        } else {
            if overflow.len() % 2 == 1 {
                overflow.push(0);
            }
            out.extend_from_slice(&((overflow_base + overflow.len()) as u32).to_le_bytes());
            overflow.extend_from_slice(&bytes);
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&overflow);
    Ok(out)
}

pub fn write_geotiff(r: &Raster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let bytes = encode_geotiff(r)?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_geotiff(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
    let f = File::open(path)?;
    TiffReader::new(BufReader::new(f))?.read_raster()
}

pub fn read_geotiff_header(path: impl AsRef<Path>) -> Result<RasterHeader, RasterError> {
    let f = File::open(path)?;
    Ok(TiffReader::new(BufReader::new(f))?.layout()?.header)
}

pub fn decode_geotiff(bytes: &[u8]) -> Result<Raster, RasterError> {
    TiffReader::new(Cursor::new(bytes))?.read_raster()
}

fn corrupt(msg: impl Into<String>) -> RasterError {
    RasterError::CorruptFile(msg.into())
}

fn unsupported(msg: impl Into<String>) -> RasterError {
    RasterError::UnsupportedLayout(msg.into())
}

fn io_to_corrupt(e: io::Error) -> RasterError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        corrupt("unexpected end of file")
    } else {
        RasterError::Io(e)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum SampleKind {
    Unsigned,
    Signed,
    Float,
}

struct Entry {
    typ: u16,
    count: u64,
    raw: [u8; 4],
}

struct Layout {
    header: RasterHeader,
    samples: usize,
    bits: usize,
    kind: SampleKind,
    planar: bool,
    rows_per_strip: usize,
    offsets: Vec<u64>,
    counts: Vec<u64>,
}

struct TiffReader<R> {
    inner: R,
    big_endian: bool,
    len: u64,
}

impl<R: Read + Seek> TiffReader<R> {
    fn new(mut inner: R) -> Result<Self, RasterError> {
        let len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        Ok(Self { inner, big_endian: false, len })
    }

    fn u16_from(&self, b: [u8; 2]) -> u16 {
        if self.big_endian {
            u16::from_be_bytes(b)
        } else {
            u16::from_le_bytes(b)
        }
    }

    fn u32_from(&self, b: [u8; 4]) -> u32 {
        if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), RasterError> {
        self.inner.read_exact(buf).map_err(io_to_corrupt)
    }

    fn read_u16(&mut self) -> Result<u16, RasterError> {
        let mut b = [0; 2];
        self.read_exact(&mut b)?;
        Ok(self.u16_from(b))
    }

    fn read_u32(&mut self) -> Result<u32, RasterError> {
        let mut b = [0; 4];
        self.read_exact(&mut b)?;
        Ok(self.u32_from(b))
    }

    fn seek(&mut self, pos: u64) -> Result<(), RasterError> {
        if pos > self.len {
            return Err(corrupt(format!("offset {pos} beyond end of file ({} bytes)", self.len)));
        }
        self.inner.seek(SeekFrom::Start(pos))?;
        Ok(())
    }

    /// Byte length of an entry's value, or `None` for unknown types.
    fn value_len(e: &Entry) -> Option<u64> {
        let size = match e.typ {
            1 | 2 | 6 | 7 => 1,
            3 | 8 => 2,
            4 | 9 | 11 => 4,
            5 | 10 | 12 | 16 | 17 => 8,
            _ => return None,
        };
        Some(size * e.count)
    }

    fn check_extent(&self, tag: u16, e: &Entry) -> Result<(), RasterError> {
        if let Some(total) = Self::value_len(e) {
            if total > 4 && self.u32_from(e.raw) as u64 + total > self.len {
                return Err(corrupt(format!("value of tag {tag} runs past end of file")));
            }
        }
        Ok(())
    }

    fn entry_bytes(&mut self, e: &Entry) -> Result<Vec<u8>, RasterError> {
        let total = Self::value_len(e).ok_or_else(|| unsupported(format!("tag type {}", e.typ)))?;
        if total <= 4 {
            return Ok(e.raw[..total as usize].to_vec());
        }
        let offset = self.u32_from(e.raw) as u64;
        if offset + total > self.len {
            return Err(corrupt("tag value past end of file"));
        }
        self.seek(offset)?;
        let mut buf = vec![0; total as usize];
        self.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn unsigned_values(&mut self, e: &Entry) -> Result<Vec<u64>, RasterError> {
        let bytes = self.entry_bytes(e)?;
        Ok(match e.typ {
            1 | 7 => bytes.iter().map(|&b| b as u64).collect(),
            3 => bytes.chunks_exact(2).map(|c| self.u16_from([c[0], c[1]]) as u64).collect(),
            4 => bytes.chunks_exact(4).map(|c| self.u32_from(c.try_into().unwrap()) as u64).collect(),
            16 => bytes
                .chunks_exact(8)
                .map(|c| {
                    let a: [u8; 8] = c.try_into().unwrap();
                    if self.big_endian {
                        u64::from_be_bytes(a)
                    } else {
                        u64::from_le_bytes(a)
                    }
                })
                .collect(),
            t => return Err(unsupported(format!("expected an integer tag, found type {t}"))),
        })
    }

    fn double_values(&mut self, e: &Entry) -> Result<Vec<f64>, RasterError> {
        if e.typ != 12 {
            return Err(unsupported(format!("expected DOUBLE tag, found type {}", e.typ)));
        }
        let bytes = self.entry_bytes(e)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| {
                let a: [u8; 8] = c.try_into().unwrap();
                if self.big_endian {
                    f64::from_be_bytes(a)
                } else {
                    f64::from_le_bytes(a)
                }
            })
            .collect())
    }

    fn ascii_value(&mut self, e: &Entry) -> Result<String, RasterError> {
        let bytes = self.entry_bytes(e)?;
        let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
        String::from_utf8(bytes[..end].to_vec()).map_err(|_| corrupt("non-UTF-8 ASCII tag"))
    }

    fn layout(&mut self) -> Result<Layout, RasterError> {
        let mut head = [0u8; 4];
        self.read_exact(&mut head)?;
        self.big_endian = match &head[..2] {
            b"II" => false,
            b"MM" => true,
            _ => return Err(corrupt("not a TIFF file")),
        };
        match self.u16_from([head[2], head[3]]) {
            42 => {}
            43 => return Err(unsupported("BigTIFF")),
            m => return Err(corrupt(format!("bad TIFF magic {m}"))),
        }
        let ifd = self.read_u32()? as u64;
        self.seek(ifd)?;
        let n = self.read_u16()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let tag = self.read_u16()?;
            let typ = self.read_u16()?;
            let count = self.read_u32()? as u64;
            let mut raw = [0; 4];
            self.read_exact(&mut raw)?;
            let entry = Entry { typ, count, raw };
            self.check_extent(tag, &entry)?;
            entries.insert(tag, entry);
        }

        if entries.contains_key(&TILE_WIDTH) {
            return Err(unsupported("tiled TIFF"));
        }
        let single = |this: &mut Self, tag: u16, default: Option<u64>| -> Result<u64, RasterError> {
            match entries.get(&tag) {
                Some(e) => this.unsigned_values(e)?.first().copied().ok_or_else(|| corrupt(format!("empty tag {tag}"))),
                None => default.ok_or_else(|| corrupt(format!("missing required tag {tag}"))),
            }
        };
        let width = single(self, IMAGE_WIDTH, None)? as usize;
        let height = single(self, IMAGE_LENGTH, None)? as usize;
        if width == 0 || height == 0 {
            return Err(corrupt("zero image dimension"));
        }
        let samples = single(self, SAMPLES_PER_PIXEL, Some(1))? as usize;
        if samples == 0 {
            return Err(corrupt("zero samples per pixel"));
        }
        let compression = single(self, COMPRESSION, Some(1))?;
        if compression != 1 {
            return Err(unsupported(format!("compression {compression}")));
        }
        let planar = single(self, PLANAR_CONFIGURATION, Some(1))? == 2;
        let rows_per_strip = (single(self, ROWS_PER_STRIP, Some(height as u64))? as usize).clamp(1, height);

        let uniform = |this: &mut Self, tag: u16, default: u64| -> Result<u64, RasterError> {
            let vals = match entries.get(&tag) {
                Some(e) => this.unsigned_values(e)?,
                None => vec![default],
            };
            let first = *vals.first().ok_or_else(|| corrupt(format!("empty tag {tag}")))?;
            if vals.iter().any(|&v| v != first) {
                return Err(unsupported(format!("mixed per-sample values in tag {tag}")));
            }
            Ok(first)
        };
        let bits = uniform(self, BITS_PER_SAMPLE, 1)? as usize;
        let kind = match uniform(self, SAMPLE_FORMAT, 1)? {
            1 => SampleKind::Unsigned,
            2 => SampleKind::Signed,
            3 => SampleKind::Float,
            f => return Err(unsupported(format!("sample format {f}"))),
        };
        let supported = matches!(
            (kind, bits),
            (SampleKind::Unsigned | SampleKind::Signed, 8 | 16 | 32) | (SampleKind::Float, 32 | 64)
        );
        if !supported {
            return Err(unsupported(format!("{bits}-bit samples of this format")));
        }

        let offsets = match entries.get(&STRIP_OFFSETS) {
            Some(e) => self.unsigned_values(e)?,
            None => return Err(corrupt("missing strip offsets")),
        };
        let counts = match entries.get(&STRIP_BYTE_COUNTS) {
            Some(e) => self.unsigned_values(e)?,
            None => return Err(corrupt("missing strip byte counts")),
        };
        let strips_per_plane = height.div_ceil(rows_per_strip);
        let expected = if planar { strips_per_plane * samples } else { strips_per_plane };
        if offsets.len() != expected || counts.len() != expected {
            return Err(corrupt(format!("expected {expected} strips, found {}", offsets.len())));
        }

        let description = match entries.get(&IMAGE_DESCRIPTION) {
            Some(e) => serde_json::from_str::<Description>(&self.ascii_value(e)?).ok(),
            None => None,
        };
        let (band_names, metadata) = match description {
            Some(d) if d.bands.len() == samples => (d.bands, d.metadata),
            _ => ((1..=samples).map(|i| format!("B{i}")).collect(), BTreeMap::new()),
        };
        let nodata = match entries.get(&GDAL_NODATA) {
            Some(e) => {
                let s = self.ascii_value(e)?;
                s.trim().parse::<f32>().map_err(|_| corrupt(format!("bad nodata value `{s}`")))?
            }
            None => f32::NAN,
        };
        let mut geo = GeoTransform::default();
        if let (Some(scale), Some(tie)) = (entries.get(&MODEL_PIXEL_SCALE), entries.get(&MODEL_TIEPOINT)) {
            let scale = self.double_values(scale)?;
            let tie = self.double_values(tie)?;
            if scale.len() >= 2 && tie.len() >= 6 {
                geo = GeoTransform {
                    origin_lat: tie[4],
                    origin_lon: tie[3],
                    pixel_lat_deg: scale[1],
                    pixel_lon_deg: scale[0],
                };
            }
        }

        Ok(Layout {
            header: RasterHeader { width, height, band_names, nodata, geo, metadata },
            samples,
            bits,
            kind,
            planar,
            rows_per_strip,
            offsets,
            counts,
        })
    }

    fn read_raster(mut self) -> Result<Raster, RasterError> {
        let layout = self.layout()?;
        let RasterHeader { width, height, .. } = layout.header;
        let bytes_per = layout.bits / 8;
        let n = layout.samples;
        let mut planes = vec![vec![0f32; width * height]; n];
        let strips_per_plane = height.div_ceil(layout.rows_per_strip);
        let mut buf = Vec::new();

        for (i, (&offset, &count)) in layout.offsets.iter().zip(&layout.counts).enumerate() {
            let (plane, strip) = if layout.planar { (Some(i / strips_per_plane), i % strips_per_plane) } else { (None, i) };
            let first_row = strip * layout.rows_per_strip;
            let rows = layout.rows_per_strip.min(height - first_row);
            let per_pixel = if layout.planar { 1 } else { n };
            let needed = (rows * width * per_pixel * bytes_per) as u64;
            if count < needed {
                return Err(corrupt(format!("strip {i} holds {count} bytes, needs {needed}")));
            }
            if offset + needed > self.len {
                return Err(corrupt(format!("strip {i} runs past end of file")));
            }
            self.seek(offset)?;
            buf.resize(needed as usize, 0);
            self.read_exact(&mut buf)?;

            let base = first_row * width;
            let samples = buf.chunks_exact(bytes_per).map(|c| self.decode_sample(c, layout.kind));
            match plane {
                Some(p) => {
                    for (j, v) in samples.enumerate() {
                        planes[p][base + j] = v;
                    }
                }
                None => {
                    for (j, v) in samples.enumerate() {
                        planes[j % n][base + j / n] = v;
                    }
                }
            }
        }

        let header = layout.header;
        let bands = header.band_names.into_iter().zip(planes).collect();
        Ok(Raster::new(width, height, bands, header.nodata)?
            .with_geo(header.geo)
            .with_metadata(header.metadata))
    }

    fn decode_sample(&self, c: &[u8], kind: SampleKind) -> f32 {
        macro_rules! num {
            ($t:ty) => {{
                let a = c.try_into().unwrap();
                if self.big_endian {
                    <$t>::from_be_bytes(a)
                } else {
                    <$t>::from_le_bytes(a)
                }
            }};
        }
        match (kind, c.len()) {
            (SampleKind::Unsigned, 1) => c[0] as f32,
            (SampleKind::Signed, 1) => c[0] as i8 as f32,
            (SampleKind::Unsigned, 2) => num!(u16) as f32,
            (SampleKind::Signed, 2) => num!(i16) as f32,
            (SampleKind::Unsigned, 4) => num!(u32) as f32,
            (SampleKind::Signed, 4) => num!(i32) as f32,
            (SampleKind::Float, 4) => num!(f32),
            (SampleKind::Float, 8) => num!(f64) as f32,
            _ => unreachable!("layout validated"),
        }
    }
}
