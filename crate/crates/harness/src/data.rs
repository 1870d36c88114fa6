//! Vector-field records `lat,lon,u,v` and their conversion to tangent vectors.
//!
//! `u` is the eastward and `v` the northward component in the local frame
//! `e_east = ∂/∂lon / ‖·‖`, `e_north = ∂/∂lat / ‖·‖`, which is undefined at the poles.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use resdgp::model::{Dataset, Targets};
use resdgp::sphere::SpherePoint;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Rows whose `cos(lat)` falls below this are treated as polar.
pub const POLE_COS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldRecord {
    pub lat: f64,
    pub lon: f64,
    pub u: f64,
    pub v: f64,
}

impl VectorFieldRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if !self.lat.is_finite() || self.lat.abs() > 90.0 {
            return Err(format!("latitude {} outside [-90, 90]", self.lat));
        }
        if !self.lon.is_finite() || !(-180.0..180.0).contains(&self.lon) {
            return Err(format!("longitude {} outside [-180, 180)", self.lon));
        }
        if !self.u.is_finite() || !self.v.is_finite() {
            return Err(format!("non-finite components ({}, {})", self.u, self.v));
        }
        Ok(())
    }

    fn is_polar(&self) -> bool {
        self.lat.to_radians().cos() < POLE_COS_TOLERANCE
    }
}

/// `(point, e_east, e_north)` at a latitude/longitude in degrees.
pub fn east_north_frame(lat: f64, lon: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (sa, ca) = lat.to_radians().sin_cos();
    let (so, co) = lon.to_radians().sin_cos();
    (
        DVector::from_vec(vec![ca * co, ca * so, sa]),
        DVector::from_vec(vec![-so, co, 0.0]),
        DVector::from_vec(vec![-sa * co, -sa * so, ca]),
    )
}

/// Point and ambient tangent vector of a non-polar record.
pub fn record_to_tangent(r: &VectorFieldRecord) -> Result<(SpherePoint, DVector<f64>)> {
    if r.is_polar() {
        return Err(HarnessError::Config(format!("record at latitude {} has no east/north frame", r.lat)));
    }
    let (x, east, north) = east_north_frame(r.lat, r.lon);
    Ok((SpherePoint::normalize(x)?, east * r.u + north * r.v))
}

/// Inverse of [`record_to_tangent`]; longitude is returned in `[-180, 180)`.
pub fn tangent_to_record(x: &SpherePoint, t: &DVector<f64>) -> Result<VectorFieldRecord> {
    if x.dim() != 2 || t.len() != 3 {
        return Err(resdgp::Error::UnsupportedDimension {
            got: x.dim(),
            context: "vector-field records live on S_2",
        }
        .into());
    }
    let c = x.coords();
    let lat = c[2].clamp(-1.0, 1.0).asin().to_degrees();
    let mut lon = c[1].atan2(c[0]).to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    }
    let (_, east, north) = east_north_frame(lat, lon);
    Ok(VectorFieldRecord {
        lat,
        lon,
        u: t.dot(&east),
        v: t.dot(&north),
    })
}

/// Parsed records plus the number of polar rows that were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub records: Vec<VectorFieldRecord>,
    pub rejected_poles: usize,
}

impl Ingested {
    pub fn to_dataset(&self) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(self.records.len());
        let mut targets = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let (x, t) = record_to_tangent(r)?;
            inputs.push(x);
            targets.push(t);
        }
        Ok(Dataset::new(inputs, Targets::Vector(targets))?)
    }
}

pub fn read_records(reader: impl Read) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| HarnessError::Row {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != ["lat", "lon", "u", "v"] {
        return Err(HarnessError::Row {
            line: 1,
            message: format!("expected header lat,lon,u,v, got {}", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let header = header.clone();
    let mut records = Vec::new();
    let mut rejected_poles = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HarnessError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: VectorFieldRecord = rec
            .deserialize(Some(&header))
            .map_err(|e| HarnessError::Row { line, message: e.to_string() })?;
        row.check().map_err(|message| HarnessError::Row { line, message })?;
        if row.is_polar() {
            rejected_poles += 1;
        } else {
            records.push(row);
        }
    }
    if records.is_empty() {
        return Err(HarnessError::NoRecords { rejected_poles });
    }
    Ok(Ingested { records, rejected_poles })
}

pub fn read_records_path(path: &Path) -> Result<Ingested> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_records(f)
}

pub fn write_records(records: &[VectorFieldRecord], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    }
    w.flush().map_err(io_err("<csv>"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_is_orthonormal_and_tangent() {
        for (lat, lon) in [(10.0, 20.0), (-45.0, -170.0), (89.0, 179.9), (0.0, 0.0)] {
            let (x, e, n) = east_north_frame(lat, lon);
            assert!((x.norm() - 1.0).abs() < 1e-15);
            assert!(e.dot(&x).abs() < 1e-15 && n.dot(&x).abs() < 1e-15 && e.dot(&n).abs() < 1e-15);
            assert!((e.norm() - 1.0).abs() < 1e-15 && (n.norm() - 1.0).abs() < 1e-15);
            // northward vector increases z, eastward turns counterclockwise about z
            assert!(n[2] > 0.0 && x[0] * e[1] - x[1] * e[0] > 0.0);
        }
    }

    #[test]
    fn parses_and_rejects_poles() {
        let text = "lat,lon,u,v\n10,20,1.5,-2\n90,0,1,1\n-90,10,0,0\n-30.5,-179.5,0.25,3\n";
        let ing = read_records(text.as_bytes()).unwrap();
        assert_eq!(ing.records.len(), 2);
        assert_eq!(ing.rejected_poles, 2);
        let data = ing.to_dataset().unwrap();
        assert_eq!(data.len(), 2);
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let bad = "lat,lon,u,v\n10,20,1,2\n10,abc,1,2\n";
        match read_records(bad.as_bytes()) {
            Err(HarnessError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let range = "lat,lon,u,v\n10,20,1,2\n0,0,0,0\n95,0,1,2\n";
        match read_records(range.as_bytes()) {
            Err(HarnessError::Row { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let lon = "lat,lon,u,v\n10,180,1,2\n";
        assert!(matches!(read_records(lon.as_bytes()), Err(HarnessError::Row { line: 2, .. })));
        assert!(matches!(read_records("x,y\n1,2\n".as_bytes()), Err(HarnessError::Row { line: 1, .. })));
        assert!(matches!(
            read_records("lat,lon,u,v\n90,0,1,1\n".as_bytes()),
            Err(HarnessError::NoRecords { rejected_poles: 1 })
        ));
    }

    #[test]
    fn write_then_read() {
        let recs = vec![VectorFieldRecord { lat: 1.25, lon: -3.5, u: 0.1, v: -7.0 }];
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap().records, recs);
    }
}
