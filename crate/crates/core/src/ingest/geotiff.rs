//! Minimal single-band float32 GeoTIFF codec: pixel scale + tiepoint
//! georeferencing, EPSG code (or free-text citation) in the GeoKey
//! directory, GDAL nodata tag, and the layer label in ImageDescription.

use std::io::{Read, Seek, Write};

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype::Gray32Float, TiffEncoder};
use tiff::tags::Tag;

use super::raster::{GridSpec, RasterGrid};
use crate::crs::Crs;
use crate::error::{Error, Result};

const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const GT_CITATION: u16 = 1026;
const GEOGRAPHIC_TYPE: u16 = 2048;
const PROJECTED_CS_TYPE: u16 = 3072;
const MODEL_PROJECTED: u16 = 1;
const MODEL_GEOGRAPHIC: u16 = 2;
const MODEL_USER_DEFINED: u16 = 32767;
const PIXEL_IS_AREA: u16 = 1;
const GEO_ASCII_PARAMS: u16 = 34737;

fn geokeys(crs_id: &str) -> (Vec<u16>, Option<String>) {
    let mut keys: Vec<[u16; 4]> = Vec::new();
    let mut ascii = None;
    match Crs::parse(crs_id) {
        Ok(crs) if crs.is_geographic() => {
            keys.push([GT_MODEL_TYPE, 0, 1, MODEL_GEOGRAPHIC]);
            keys.push([GT_RASTER_TYPE, 0, 1, PIXEL_IS_AREA]);
            keys.push([GEOGRAPHIC_TYPE, 0, 1, crs.epsg() as u16]);
        }
        Ok(crs) => {
            keys.push([GT_MODEL_TYPE, 0, 1, MODEL_PROJECTED]);
            keys.push([GT_RASTER_TYPE, 0, 1, PIXEL_IS_AREA]);
            keys.push([PROJECTED_CS_TYPE, 0, 1, crs.epsg() as u16]);
        }
        Err(_) => {
            let text = format!("{crs_id}|");
            keys.push([GT_MODEL_TYPE, 0, 1, MODEL_USER_DEFINED]);
            keys.push([GT_RASTER_TYPE, 0, 1, PIXEL_IS_AREA]);
            keys.push([GT_CITATION, GEO_ASCII_PARAMS, text.len() as u16, 0]);
            ascii = Some(text);
        }
    }
    let mut dir = vec![1, 1, 0, keys.len() as u16];
    dir.extend(keys.into_iter().flatten());
    (dir, ascii)
}

pub(super) fn write<W: Write + Seek>(grid: &RasterGrid, writer: W) -> Result<()> {
    let g = &grid.grid;
    let mut encoder = TiffEncoder::new(writer)?;
    let mut image = encoder.new_image::<Gray32Float>(g.n_cols as u32, g.n_rows as u32)?;
    let (dir, ascii) = geokeys(&g.crs_id);
    {
        let enc = image.encoder();
        enc.write_tag(Tag::ModelPixelScaleTag, &[g.pixel_size, g.pixel_size, 0.0][..])?;
        enc.write_tag(
            Tag::ModelTiepointTag,
            &[0.0, 0.0, 0.0, g.origin_x, g.origin_y, 0.0][..],
        )?;
        enc.write_tag(Tag::GeoKeyDirectoryTag, dir.as_slice())?;
        if let Some(text) = &ascii {
            enc.write_tag(Tag::GeoAsciiParamsTag, text.as_str())?;
        }
        enc.write_tag(Tag::GdalNodata, grid.nodata.to_string().as_str())?;
        if !grid.semantic.is_empty() {
            enc.write_tag(Tag::ImageDescription, grid.semantic.as_str())?;
        }
    }
    image.write_data(&grid.values)?;
    Ok(())
}

fn crs_from_keys(dir: &[u16], ascii: Option<&str>) -> Option<String> {
    if dir.len() < 4 {
        return None;
    }
    let n = dir[3] as usize;
    let mut citation = None;
    for k in dir[4..].chunks_exact(4).take(n) {
        match (k[0], k[1]) {
            (PROJECTED_CS_TYPE, 0) | (GEOGRAPHIC_TYPE, 0) => return Some(format!("EPSG:{}", k[3])),
            (GT_CITATION, GEO_ASCII_PARAMS) => {
                let (off, len) = (k[3] as usize, k[2] as usize);
                citation = ascii
                    .and_then(|a| a.get(off..off + len))
                    .map(|s| s.trim_end_matches(['|', '\0']).to_string());
            }
            _ => {}
        }
    }
    citation
}

fn to_f32(data: DecodingResult) -> Result<Vec<f32>> {
    Ok(match data {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(Error::invalid("unsupported GeoTIFF sample type")),
    })
}

pub(super) fn read<R: Read + Seek>(reader: R) -> Result<RasterGrid> {
    let mut dec = Decoder::new(reader)?.with_limits(Limits::unlimited());
    let samples = dec.find_tag_unsigned::<u16>(Tag::SamplesPerPixel)?.unwrap_or(1);
    if samples != 1 {
        return Err(Error::invalid(format!(
            "multi-band GeoTIFF ({samples} bands); split bands upstream"
        )));
    }
    let (width, height) = dec.dimensions()?;
    let scale = dec
        .find_tag(Tag::ModelPixelScaleTag)?
        .map(|v| v.into_f64_vec())
        .transpose()?;
    let tie = dec
        .find_tag(Tag::ModelTiepointTag)?
        .map(|v| v.into_f64_vec())
        .transpose()?;
    let (scale, tie) = match (scale, tie) {
        (Some(s), Some(t)) if s.len() >= 2 && t.len() >= 6 => (s, t),
        _ => return Err(Error::invalid("GeoTIFF is missing georeferencing")),
    };
    if (scale[0] - scale[1]).abs() > 1e-9 * scale[0].abs() {
        return Err(Error::invalid("non-square pixels are not supported"));
    }
    let ascii = dec
        .find_tag(Tag::GeoAsciiParamsTag)?
        .map(|v| v.into_string())
        .transpose()?;
    let crs_id = match dec.find_tag(Tag::GeoKeyDirectoryTag)? {
        Some(v) => crs_from_keys(&v.into_u16_vec()?, ascii.as_deref()),
        None => None,
    }
    .ok_or_else(|| Error::invalid("GeoTIFF has no CRS"))?;
    let nodata = match dec.find_tag(Tag::GdalNodata)? {
        Some(v) => {
            let s = v.into_string()?;
            s.trim_matches(['\0', ' '])
                .parse::<f32>()
                .map_err(|_| Error::invalid(format!("bad nodata tag `{s}`")))?
        }
        None => f32::NAN,
    };
    let semantic = dec
        .find_tag(Tag::ImageDescription)?
        .map(|v| v.into_string())
        .transpose()?
        .unwrap_or_default();
    let ps = scale[0];
    let grid = GridSpec {
        origin_x: tie[3] - tie[0] * ps,
        origin_y: tie[4] + tie[1] * ps,
        pixel_size: ps,
        n_rows: height as usize,
        n_cols: width as usize,
        crs_id,
    };
    let values = to_f32(dec.read_image()?)?;
    RasterGrid::from_raw(grid, nodata, values, semantic)
}
