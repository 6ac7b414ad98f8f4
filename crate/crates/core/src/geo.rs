//! Spherical geometry helpers shared by the spatial modules.

use serde::{Deserialize, Serialize};

/// Mean Earth radius (IUGG), km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance in km between two lon/lat points in degrees.
pub fn great_circle_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Equirectangular projection about a reference point, in km.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub lon0: f64,
    pub lat0: f64,
}

impl LocalProjection {
    pub fn new(lon0: f64, lat0: f64) -> Self {
        Self { lon0, lat0 }
    }

    fn km_per_deg_lat() -> f64 {
        EARTH_RADIUS_KM * std::f64::consts::PI / 180.0
    }

    pub fn to_km(&self, lon: f64, lat: f64) -> (f64, f64) {
        let k = Self::km_per_deg_lat();
        ((lon - self.lon0) * k * self.lat0.to_radians().cos(), (lat - self.lat0) * k)
    }

    pub fn to_lonlat(&self, x: f64, y: f64) -> (f64, f64) {
        let k = Self::km_per_deg_lat();
        (self.lon0 + x / (k * self.lat0.to_radians().cos()), self.lat0 + y / k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_degree_of_latitude() {
        let d = great_circle_km(0.0, 0.0, 0.0, 1.0);
        assert!((d - 111.195).abs() < 1e-2, "{d}");
        assert_eq!(great_circle_km(10.0, 20.0, 10.0, 20.0), 0.0);
    }

    #[test]
    fn projection_round_trip() {
        let p = LocalProjection::new(-105.0, 40.0);
        let (x, y) = p.to_km(-104.3, 40.7);
        let (lon, lat) = p.to_lonlat(x, y);
        assert!((lon + 104.3).abs() < 1e-12 && (lat - 40.7).abs() < 1e-12);
    }
}
