//! Rectangular tiles with overlapping super tiles, buffered month windows,
//! a deterministic per-(tile, month) task runner, and cross-tile smoothing
//! of covariance parameters.
//!
//! Training for a tile uses every site inside its super tile: the tile
//! rectangle grown on each side by `margin_frac` times the tile's width (in
//! longitude) and height (in latitude). With the default margin of 0.4 a
//! super tile is 1.8 tile widths across.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CalendarIndex, Site, SiteGrid};
use crate::error::{Error, Result};
use crate::spatialfield::GpModel;
use crate::tps::fit_tps;

pub const DEFAULT_MARGIN: f64 = 0.4;
pub const DEFAULT_BUFFER_DAYS: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn height(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    /// Closed containment.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.lon_min + self.lon_max), 0.5 * (self.lat_min + self.lat_max))
    }

    fn expand(&self, fx: f64, fy: f64) -> Rect {
        let (dx, dy) = (fx * self.width(), fy * self.height());
        Rect {
            lon_min: self.lon_min - dx,
            lon_max: self.lon_max + dx,
            lat_min: self.lat_min - dy,
            lat_max: self.lat_max + dy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub id: usize,
    pub ix: usize,
    pub iy: usize,
    pub bounds: Rect,
    pub super_bounds: Rect,
    /// Indices of sites assigned to this tile.
    pub sites: Vec<usize>,
    /// Indices of sites inside the super tile.
    pub super_sites: Vec<usize>,
}

impl Tile {
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileLayout {
    pub nx: usize,
    pub ny: usize,
    pub margin_frac: f64,
    pub domain: Rect,
    pub tiles: Vec<Tile>,
}

impl TileLayout {
    /// Tile index for a location inside the domain.
    pub fn tile_of(&self, lon: f64, lat: f64) -> Option<usize> {
        if !self.domain.contains(lon, lat) {
            return None;
        }
        let w = self.domain.width() / self.nx as f64;
        let h = self.domain.height() / self.ny as f64;
        let ix = (((lon - self.domain.lon_min) / w).floor() as usize).min(self.nx - 1);
        let iy = (((lat - self.domain.lat_min) / h).floor() as usize).min(self.ny - 1);
        Some(iy * self.nx + ix)
    }

    pub fn non_empty(&self) -> impl Iterator<Item = &Tile> {
        self.tiles.iter().filter(|t| !t.is_empty())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Splits the bounding box of `sites` into `nx × ny` tiles.
pub fn build_layout(sites: &SiteGrid, nx: usize, ny: usize, margin_frac: f64) -> Result<TileLayout> {
    if nx == 0 || ny == 0 {
        return Err(Error::Argument("tile counts must be at least 1".into()));
    }
    if !(margin_frac >= 0.0 && margin_frac.is_finite()) {
        return Err(Error::Argument(format!("margin must be ≥ 0, got {margin_frac}")));
    }
    let (lon0, lat0, mut lon1, mut lat1) = sites
        .bbox()
        .ok_or_else(|| Error::EmptySelection("layout needs at least one site".into()))?;
    // A degenerate extent still needs positive tile sizes.
    if lon1 - lon0 <= 0.0 {
        lon1 = lon0 + 1e-6;
    }
    if lat1 - lat0 <= 0.0 {
        lat1 = lat0 + 1e-6;
    }
    let domain = Rect {
        lon_min: lon0,
        lon_max: lon1,
        lat_min: lat0,
        lat_max: lat1,
    };
    let (w, h) = (domain.width() / nx as f64, domain.height() / ny as f64);
    let mut tiles: Vec<Tile> = (0..ny)
        .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
        .enumerate()
        .map(|(id, (ix, iy))| {
            let bounds = Rect {
                lon_min: lon0 + ix as f64 * w,
                lon_max: if ix + 1 == nx { lon1 } else { lon0 + (ix + 1) as f64 * w },
                lat_min: lat0 + iy as f64 * h,
                lat_max: if iy + 1 == ny { lat1 } else { lat0 + (iy + 1) as f64 * h },
            };
            Tile {
                id,
                ix,
                iy,
                bounds,
                super_bounds: bounds.expand(margin_frac, margin_frac),
                sites: Vec::new(),
                super_sites: Vec::new(),
            }
        })
        .collect();
    let mut layout = TileLayout {
        nx,
        ny,
        margin_frac,
        domain,
        tiles: Vec::new(),
    };
    for (i, s) in sites.sites().iter().enumerate() {
        let t = layout.tile_of(s.lon, s.lat).expect("site inside its own bounding box");
        tiles[t].sites.push(i);
        for tile in tiles.iter_mut() {
            if tile.super_bounds.contains(s.lon, s.lat) {
                tile.super_sites.push(i);
            }
        }
    }
    if tiles.iter().all(|t| t.is_empty()) {
        return Err(Error::EmptySelection("every tile is empty".into()));
    }
    let empty = tiles.iter().filter(|t| t.is_empty()).count();
    if empty > 0 {
        log::info!("{empty} of {} tiles have no sites", tiles.len());
    }
    layout.tiles = tiles;
    Ok(layout)
}

/// Days of a calendar month plus a buffer on both sides, in any year.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthWindow {
    pub month: u32,
    pub buffer_days: u32,
}

fn month_span(year: i32, month: u32) -> (NaiveDate, NaiveDate) {
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    let next = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    }
    .expect("valid month");
    (first, next - Duration::days(1))
}

impl MonthWindow {
    pub fn new(month: u32, buffer_days: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Argument(format!("month must be 1..=12, got {month}")));
        }
        Ok(Self { month, buffer_days })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        let b = Duration::days(self.buffer_days as i64);
        (date.year() - 1..=date.year() + 1).any(|y| {
            let (first, last) = month_span(y, self.month);
            date >= first - b && date <= last + b
        })
    }

    /// Indices of calendar days inside the window.
    pub fn days(&self, calendar: &CalendarIndex) -> Vec<usize> {
        (0..calendar.len()).filter(|&d| self.contains(calendar.date(d))).collect()
    }
}

pub fn month_window(month: u32, buffer_days: u32) -> Result<MonthWindow> {
    MonthWindow::new(month, buffer_days)
}

#[derive(Clone, Debug)]
pub struct TaskOutcome<T> {
    pub tile: usize,
    pub month: u32,
    pub result: std::result::Result<T, String>,
}

/// Runs `task` for every non-empty tile and month on a pool of `workers`
/// threads. Panics and errors are caught per task. Outcomes are ordered by
/// `(tile, month)` whatever the worker count.
pub fn run_tiles<T, F>(layout: &TileLayout, months: &[u32], workers: usize, task: F) -> Result<Vec<TaskOutcome<T>>>
where
    T: Send,
    F: Fn(&Tile, u32) -> Result<T> + Sync,
{
    let mut months = months.to_vec();
    months.sort_unstable();
    months.dedup();
    let jobs: Vec<(&Tile, u32)> = layout
        .non_empty()
        .flat_map(|t| months.iter().map(move |m| (t, *m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|(tile, month)| {
                let result = match catch_unwind(AssertUnwindSafe(|| task(tile, *month))) {
                    Ok(Ok(v)) => Ok(v),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(p) => Err(p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "task panicked".into())),
                };
                if let Err(e) = &result {
                    log::warn!("tile {} month {month} failed: {e}", tile.id);
                }
                TaskOutcome {
                    tile: tile.id,
                    month: *month,
                    result,
                }
            })
            .collect()
    }))
}

/// Smooths log-range, log-sill, log-nugget and `beta_cov` across tile
/// centers with a likelihood-tuned thin-plate spline. Fewer than four tiles
/// (or collinear centers) leave the parameters untouched.
pub fn smooth_covariance_params(models: &[GpModel], centers: &[(f64, f64)]) -> Vec<GpModel> {
    if models.len() != centers.len() || models.len() < 4 {
        if models.len() < 4 {
            log::warn!("only {} tiles; covariance parameters left unsmoothed", models.len());
        }
        return models.to_vec();
    }
    let sites: Vec<Site> = centers
        .iter()
        .enumerate()
        .map(|(i, (lon, lat))| Site {
            id: i as u32,
            lon: *lon,
            lat: *lat,
        })
        .collect();
    let Ok(grid) = SiteGrid::with_estimated_spacing(sites) else {
        log::warn!("tile centers do not form a valid site set; covariance parameters left unsmoothed");
        return models.to_vec();
    };
    let floor = 1e-12;
    let columns: [Vec<f64>; 4] = [
        models.iter().map(|m| m.range_km.ln()).collect(),
        models.iter().map(|m| m.sill.max(floor).ln()).collect(),
        models.iter().map(|m| m.nugget.max(floor).ln()).collect(),
        models.iter().map(|m| m.beta_cov).collect(),
    ];
    let mut smoothed = Vec::with_capacity(4);
    for col in &columns {
        match fit_tps(&grid, col, None) {
            Ok(fit) => smoothed.push(crate::tps::predict_tps(&fit, &grid)),
            Err(e) => {
                log::warn!("covariance smoothing skipped: {e}");
                return models.to_vec();
            }
        }
    }
    models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut out = m.clone();
            out.range_km = smoothed[0][i].exp();
            out.sill = if m.sill > 0.0 { smoothed[1][i].exp() } else { 0.0 };
            out.nugget = if m.nugget > 0.0 { smoothed[2][i].exp() } else { 0.0 };
            out.beta_cov = smoothed[3][i];
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatialfield::CovFamily;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> SiteGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SiteGrid::with_estimated_spacing(
            (0..n)
                .map(|i| Site {
                    id: i as u32,
                    lon: -124.0 + 57.0 * rng.random::<f64>(),
                    lat: 25.0 + 24.0 * rng.random::<f64>(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_tile() {
        let sites = SiteGrid::regular(-100.0, 40.0, 4, 4, 20.0).unwrap();
        let l = build_layout(&sites, 1, 1, 0.4).unwrap();
        assert_eq!(l.tiles.len(), 1);
        let t = &l.tiles[0];
        assert_eq!(t.bounds, l.domain);
        assert!((t.super_bounds.width() - 1.8 * t.bounds.width()).abs() < 1e-12);
        assert_eq!(t.sites.len(), 16);
    }

    #[test]
    fn conus_layout_has_320_tiles() {
        let l = build_layout(&cloud(3000, 1), 20, 16, DEFAULT_MARGIN).unwrap();
        assert_eq!(l.tiles.len(), 320);
        assert_eq!(l.tiles.iter().map(|t| t.sites.len()).sum::<usize>(), 3000);
        for t in &l.tiles {
            let w = t.bounds.width();
            assert!((t.super_bounds.lon_min - (t.bounds.lon_min - 0.4 * w)).abs() < 1e-9);
            assert!((t.super_bounds.lon_max - (t.bounds.lon_max + 0.4 * w)).abs() < 1e-9);
        }
    }

    #[test]
    fn five_degree_tile_grows_by_two_degrees_per_side() {
        let sites = SiteGrid::new(
            vec![
                Site { id: 0, lon: -110.0, lat: 30.0 },
                Site { id: 1, lon: -105.0, lat: 35.0 },
            ],
            100.0,
        )
        .unwrap();
        let l = build_layout(&sites, 1, 1, 0.4).unwrap();
        let t = &l.tiles[0];
        assert!((t.bounds.lon_min - t.super_bounds.lon_min - 2.0).abs() < 1e-12);
        assert!((t.super_bounds.width() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn interior_super_tiles_overlap() {
        let sites = SiteGrid::regular(-100.0, 40.0, 20, 20, 10.0).unwrap();
        let l = build_layout(&sites, 4, 4, 0.4).unwrap();
        let t = &l.tiles[5];
        assert!(t.super_sites.len() > t.sites.len());
        assert!(t.sites.iter().all(|s| t.super_sites.contains(s)));
        let right = &l.tiles[6];
        assert!(t.super_sites.iter().any(|s| right.super_sites.contains(s)));
    }

    #[test]
    fn all_empty_is_error() {
        assert!(build_layout(&cloud(5, 2), 0, 3, 0.4).is_err());
        assert!(build_layout(&cloud(5, 2), 3, 3, -0.1).is_err());
    }

    #[test]
    fn month_windows() {
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(), 3652);
        let w0 = month_window(4, 0).unwrap();
        assert!(w0.days(&cal).iter().all(|&d| cal.month_of(d) == 4));
        assert_eq!(w0.days(&cal).len(), 300);
        let w = month_window(4, 10).unwrap();
        assert_eq!(w.days(&cal).len(), 10 * (30 + 20));
        let jan = month_window(1, 10).unwrap();
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
        assert!(jan.contains(d(2011, 12, 22)) && jan.contains(d(2012, 2, 10)));
        assert!(!jan.contains(d(2011, 12, 21)) && !jan.contains(d(2012, 2, 11)));
        assert!(month_window(13, 0).is_err());
    }

    #[test]
    fn worker_invariance_and_failure_isolation() {
        let sites = SiteGrid::regular(-100.0, 40.0, 10, 10, 10.0).unwrap();
        let l = build_layout(&sites, 2, 2, 0.4).unwrap();
        let task = |t: &Tile, m: u32| -> Result<u64> {
            if t.id == 3 && m == 7 {
                panic!("planted failure");
            }
            Ok(t.super_sites.iter().map(|s| *s as u64).sum::<u64>() * m as u64)
        };
        let one = run_tiles(&l, &[1, 7], 1, task).unwrap();
        let four = run_tiles(&l, &[7, 1], 4, task).unwrap();
        assert_eq!(one.len(), 8);
        for (a, b) in one.iter().zip(&four) {
            assert_eq!((a.tile, a.month, &a.result), (b.tile, b.month, &b.result));
        }
        let failed: Vec<(usize, u32)> = one.iter().filter(|o| o.result.is_err()).map(|o| (o.tile, o.month)).collect();
        assert_eq!(failed, vec![(3, 7)]);
    }

    fn gp(range: f64, sill: f64, nugget: f64, beta: f64) -> GpModel {
        GpModel {
            j: 1,
            beta_cov: beta,
            beta_cov_se: 0.1,
            cov_family: CovFamily::Exponential,
            range_km: range,
            sill,
            nugget,
            x_mean: 0.0,
            x_sd: 1.0,
            log_likelihood: 0.0,
            at_bound: vec![],
        }
    }

    fn centers5() -> Vec<(f64, f64)> {
        (0..25).map(|i| (-110.0 + (i % 5) as f64 * 2.0 + 0.01 * (i / 5) as f64, 30.0 + (i / 5) as f64 * 2.0)).collect()
    }

    #[test]
    fn smoothing_identity_and_linear() {
        let c = centers5();
        let same = vec![gp(60.0, 1.0, 0.1, 0.2); 25];
        for (a, b) in smooth_covariance_params(&same, &c).iter().zip(&same) {
            assert!((a.range_km - b.range_km).abs() < 1e-9 && (a.sill - b.sill).abs() < 1e-12);
            assert!((a.beta_cov - b.beta_cov).abs() < 1e-12);
        }
        let lin: Vec<GpModel> = c.iter().map(|(lon, lat)| gp((4.0 + 0.05 * (lon + 110.0) - 0.02 * (lat - 30.0)).exp(), 1.0, 0.1, 0.0)).collect();
        for (a, b) in smooth_covariance_params(&lin, &c).iter().zip(&lin) {
            assert!((a.range_km.ln() - b.range_km.ln()).abs() < 1e-9);
        }
        let few = vec![gp(60.0, 1.0, 0.1, 0.2); 3];
        assert_eq!(smooth_covariance_params(&few, &c[..3]), few);
    }

    #[test]
    fn outlier_is_pulled_toward_neighbours() {
        let c = centers5();
        let planted = |lon: f64, lat: f64| 4.0 + 0.05 * (lon + 110.0) + 0.01 * (lat - 30.0).powi(2) / 4.0;
        let mut models: Vec<GpModel> = c.iter().map(|(lon, lat)| gp(planted(*lon, *lat).exp(), 1.0, 0.1, 0.0)).collect();
        models[12].range_km *= 3.0;
        let s = smooth_covariance_params(&models, &c);
        let truth = planted(c[12].0, c[12].1);
        assert!((s[12].range_km.ln() - truth).abs() < (models[12].range_km.ln() - truth).abs());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_site_in_exactly_one_tile(seed in 0u64..200, nx in 1usize..6, ny in 1usize..6) {
            let sites = cloud(200, seed);
            let l = build_layout(&sites, nx, ny, 0.4).unwrap();
            let mut seen = vec![0usize; 200];
            for t in &l.tiles {
                for s in &t.sites {
                    seen[*s] += 1;
                    prop_assert!(t.super_sites.contains(s));
                    let site = sites.site(*s);
                    prop_assert_eq!(l.tile_of(site.lon, site.lat), Some(t.id));
                }
            }
            prop_assert!(seen.iter().all(|c| *c == 1));
        }
    }
}
