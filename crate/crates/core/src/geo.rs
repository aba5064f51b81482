//! Geodetic positions and great-circle distances.
//!
//! Positions are WGS-84 latitude/longitude/altitude triples. Distances use a
//! spherical earth of radius [`EARTH_RADIUS_M`] and the haversine formula,
//! which is far below a millimeter of error at parking-lot scale.

use std::fmt;

use num_traits::{Float, FloatConst};
use serde::{Deserialize, Serialize};

/// Mean earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Which coordinate failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Lat,
    Lon,
    Alt,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Lat => "lat",
            Field::Lon => "lon",
            Field::Alt => "alt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GeoError {
    #[error("{0} out of range")]
    OutOfRange(Field),
}

/// A validated latitude/longitude/altitude triple.
///
/// Fields are private so a value of this type is always in range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawPoint<T>",
    into = "RawPoint<T>",
    bound(
        serialize = "T: Float + Serialize",
        deserialize = "T: Float + Deserialize<'de>"
    )
)]
pub struct GeoPoint<T> {
    lat_deg: T,
    lon_deg: T,
    alt_m: T,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPoint<T> {
    lat_deg: T,
    lon_deg: T,
    alt_m: T,
}

impl<T: Float> TryFrom<RawPoint<T>> for GeoPoint<T> {
    type Error = GeoError;

    fn try_from(raw: RawPoint<T>) -> Result<Self, GeoError> {
        GeoPoint::new(raw.lat_deg, raw.lon_deg, raw.alt_m)
    }
}

impl<T: Float> From<GeoPoint<T>> for RawPoint<T> {
    fn from(p: GeoPoint<T>) -> Self {
        RawPoint {
            lat_deg: p.lat_deg,
            lon_deg: p.lon_deg,
            alt_m: p.alt_m,
        }
    }
}

impl<T: Float> GeoPoint<T> {
    /// Builds a position, rejecting anything outside lat ∈ [−90, 90],
    /// lon ∈ [−180, 180] or a non-finite altitude. Bounds are inclusive.
    pub fn new(lat_deg: T, lon_deg: T, alt_m: T) -> Result<Self, GeoError> {
        let ninety = T::from(90.0).unwrap();
        let one_eighty = T::from(180.0).unwrap();
        // NaN fails both comparisons, so it is rejected here too.
        if !(lat_deg >= -ninety && lat_deg <= ninety) {
            return Err(GeoError::OutOfRange(Field::Lat));
        }
        if !(lon_deg >= -one_eighty && lon_deg <= one_eighty) {
            return Err(GeoError::OutOfRange(Field::Lon));
        }
        if !alt_m.is_finite() {
            return Err(GeoError::OutOfRange(Field::Alt));
        }
        Ok(GeoPoint {
            lat_deg,
            lon_deg,
            alt_m,
        })
    }

    pub fn lat_deg(&self) -> T {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> T {
        self.lon_deg
    }

    pub fn alt_m(&self) -> T {
        self.alt_m
    }

    /// Same horizontal position at a different altitude.
    pub fn with_alt(&self, alt_m: T) -> Result<Self, GeoError> {
        GeoPoint::new(self.lat_deg, self.lon_deg, alt_m)
    }

    /// Shifts the point by a local north/east offset in meters.
    ///
    /// Uses a flat tangent-plane approximation, adequate for offsets of a few
    /// kilometers away from the poles.
    pub fn offset_m(&self, north_m: T, east_m: T) -> Result<Self, GeoError> {
        let radius = T::from(EARTH_RADIUS_M).unwrap();
        let dlat = (north_m / radius).to_degrees();
        let dlon = (east_m / (radius * self.lat_deg.to_radians().cos())).to_degrees();
        GeoPoint::new(self.lat_deg + dlat, self.lon_deg + dlon, self.alt_m)
    }

    /// Converts to another float width.
    pub fn cast<U: Float>(&self) -> Result<GeoPoint<U>, GeoError> {
        let conv = |v: T, field| U::from(v).ok_or(GeoError::OutOfRange(field));
        GeoPoint::new(
            conv(self.lat_deg, Field::Lat)?,
            conv(self.lon_deg, Field::Lon)?,
            conv(self.alt_m, Field::Alt)?,
        )
    }
}

/// Validating constructor; the free-function form of [`GeoPoint::new`].
pub fn make_position<T: Float>(lat_deg: T, lon_deg: T, alt_m: T) -> Result<GeoPoint<T>, GeoError> {
    GeoPoint::new(lat_deg, lon_deg, alt_m)
}

/// Haversine great-circle distance in meters, ignoring altitude.
pub fn surface_distance_m<T: Float + FloatConst>(a: &GeoPoint<T>, b: &GeoPoint<T>) -> T {
    let two = T::one() + T::one();
    let lat1 = a.lat_deg.to_radians();
    let lat2 = b.lat_deg.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let s_lat = (dlat / two).sin();
    let s_lon = (dlon / two).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    // Rounding can push h a hair past 1 for antipodal points.
    let h = h.min(T::one()).max(T::zero());
    two * T::from(EARTH_RADIUS_M).unwrap() * h.sqrt().asin()
}

/// Straight-line distance combining the surface distance with the altitude gap.
pub fn slant_distance_m<T: Float + FloatConst>(a: &GeoPoint<T>, b: &GeoPoint<T>) -> T {
    surface_distance_m(a, b).hypot(a.alt_m - b.alt_m)
}
