//! Geodetic points, the local east/north/up frame, and the handful of unit
//! constants used for separation standards.
//!
//! Distances between aircraft use a haversine great-circle on a spherical
//! earth. Kinematics run in a planar frame anchored at a declared origin
//! (equirectangular projection scaled by the cosine of the origin latitude).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean earth radius used by the haversine distance and the local projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub mod units {
    //! Unit constants. All quantities inside the crate are SI.

    pub const FOOT: f64 = 0.3048;
    pub const NAUTICAL_MILE: f64 = 1852.0;
    /// Standard gravity, m/s².
    pub const G0: f64 = 9.806_65;
    pub const KMH: f64 = 1.0 / 3.6;

    pub fn feet(v: f64) -> f64 {
        v * FOOT
    }

    pub fn nautical_miles(v: f64) -> f64 {
        v * NAUTICAL_MILE
    }
}

/// Largest latitude offset from the frame origin for which the local
/// projection is accepted.
pub const MAX_LOCAL_LAT_SPAN_DEG: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("unsupported region: {0}")]
    UnsupportedRegion(String),
    #[error("relative bearing undefined for coincident horizontal positions")]
    UndefinedBearing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    /// Degrees east.
    pub lon: f64,
    /// Degrees north.
    pub lat: f64,
    /// Metres above the reference surface.
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64, alt: f64) -> Result<Self, GeoError> {
        let p = Self { lon, lat, alt };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.lon.is_finite() && self.lat.is_finite() && self.alt.is_finite()) {
            return Err(GeoError::InvalidCoordinate(format!(
                "non-finite component in ({}, {}, {})",
                self.lon, self.lat, self.alt
            )));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeoError::InvalidCoordinate(format!(
                "longitude {} outside [-180, 180]",
                self.lon
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(GeoError::InvalidCoordinate(format!(
                "latitude {} outside [-90, 90]",
                self.lat
            )));
        }
        Ok(())
    }
}

/// Position in a local tangent frame, metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl EnuPoint {
    pub const ORIGIN: EnuPoint = EnuPoint {
        east: 0.0,
        north: 0.0,
        up: 0.0,
    };

    pub const fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    pub fn is_finite(&self) -> bool {
        self.east.is_finite() && self.north.is_finite() && self.up.is_finite()
    }

    pub fn horizontal_distance(&self, other: &EnuPoint) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }

    pub fn distance(&self, other: &EnuPoint) -> f64 {
        let dx = self.east - other.east;
        let dy = self.north - other.north;
        let dz = self.up - other.up;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.east, self.north, self.up]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for EnuPoint {
    type Output = EnuPoint;
    fn add(self, o: EnuPoint) -> EnuPoint {
        EnuPoint::new(self.east + o.east, self.north + o.north, self.up + o.up)
    }
}

impl std::ops::Sub for EnuPoint {
    type Output = EnuPoint;
    fn sub(self, o: EnuPoint) -> EnuPoint {
        EnuPoint::new(self.east - o.east, self.north - o.north, self.up - o.up)
    }
}

/// Haversine great-circle distance in metres. Altitude is ignored.
pub fn geodesic_distance(a: &GeoPoint, b: &GeoPoint) -> Result<f64, GeoError> {
    a.validate()?;
    b.validate()?;
    Ok(haversine(a, b))
}

/// Unchecked haversine for hot loops over already validated points.
#[inline]
pub(crate) fn haversine(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let s1 = (dphi * 0.5).sin();
    let s2 = (dlambda * 0.5).sin();
    let h = s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// A local planar frame anchored at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    origin: GeoPoint,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Result<Self, GeoError> {
        origin.validate()?;
        let cos_lat = origin.lat.to_radians().cos();
        if cos_lat < 1e-3 {
            return Err(GeoError::UnsupportedRegion(format!(
                "frame origin latitude {} too close to a pole",
                origin.lat
            )));
        }
        Ok(Self { origin })
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    #[inline]
    fn cos_lat(&self) -> f64 {
        self.origin.lat.to_radians().cos()
    }

    pub fn to_enu(&self, p: &GeoPoint) -> Result<EnuPoint, GeoError> {
        p.validate()?;
        if (p.lat - self.origin.lat).abs() >= MAX_LOCAL_LAT_SPAN_DEG {
            return Err(GeoError::UnsupportedRegion(format!(
                "latitude {} is {} deg or more from the frame origin",
                p.lat, MAX_LOCAL_LAT_SPAN_DEG
            )));
        }
        Ok(self.to_enu_unchecked(p))
    }

    #[inline]
    pub(crate) fn to_enu_unchecked(self, p: &GeoPoint) -> EnuPoint {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        EnuPoint {
            east: (p.lon - self.origin.lon) * k * self.cos_lat(),
            north: (p.lat - self.origin.lat) * k,
            up: p.alt - self.origin.alt,
        }
    }

    /// Great-circle horizontal distance between two local points.
    pub fn geodesic_horizontal(&self, a: &EnuPoint, b: &EnuPoint) -> f64 {
        haversine(&self.from_enu(a), &self.from_enu(b))
    }

    pub fn from_enu(&self, e: &EnuPoint) -> GeoPoint {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        GeoPoint {
            lon: self.origin.lon + e.east / (k * self.cos_lat()),
            lat: self.origin.lat + e.north / k,
            alt: self.origin.alt + e.up,
        }
    }
}

/// Projects `p` into the local frame anchored at `origin`.
pub fn to_enu(p: &GeoPoint, origin: &GeoPoint) -> Result<EnuPoint, GeoError> {
    LocalFrame::new(*origin)?.to_enu(p)
}

pub fn from_enu(e: &EnuPoint, origin: &GeoPoint) -> Result<GeoPoint, GeoError> {
    if !e.is_finite() {
        return Err(GeoError::InvalidCoordinate("non-finite ENU point".into()));
    }
    Ok(LocalFrame::new(*origin)?.from_enu(e))
}

/// Compass bearing (0 = north, clockwise) from `from` to `to`, degrees in [0, 360).
pub fn compass_bearing(from: &EnuPoint, to: &EnuPoint) -> Result<f64, GeoError> {
    let de = to.east - from.east;
    let dn = to.north - from.north;
    if de == 0.0 && dn == 0.0 {
        return Err(GeoError::UndefinedBearing);
    }
    Ok(wrap_degrees(de.atan2(dn).to_degrees()))
}

/// Bearing of `other` relative to the ownship course: 0 dead ahead, 90 to
/// the right, measured clockwise.
pub fn relative_bearing(own_pos: &EnuPoint, own_course_deg: f64, other_pos: &EnuPoint) -> Result<f64, GeoError> {
    if !own_course_deg.is_finite() {
        return Err(GeoError::InvalidCoordinate("non-finite course".into()));
    }
    let absolute = compass_bearing(own_pos, other_pos)?;
    Ok(wrap_degrees(absolute - own_course_deg))
}

/// Wraps an angle into [0, 360).
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}
