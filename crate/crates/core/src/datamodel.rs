//! Core gridded data types and their delimited-text representations.
//!
//! Hourly values follow the hour-ending local-standard-time convention: slot
//! `h` (1..=24 in files, `h - 1` in memory) holds the mean irradiance over
//! `[h - 1, h)`. Missing cells are stored as [`MISSING`] (NaN) in memory and
//! written as `NA`.
//!
//! Daily values are daily *totals*: the sum of the 24 hourly W/m² values over
//! one-hour steps, in Wh/m². A diurnal template whose hour slots sum to one
//! then reproduces the daily value exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::great_circle_km;

/// Hour slots per day.
pub const HOURS: usize = 24;

/// In-memory missing-value sentinel.
pub const MISSING: f64 = f64::NAN;

const NA: &str = "NA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: u32,
    pub lon: f64,
    pub lat: f64,
}

/// A set of georeferenced sites sharing one nominal grid pitch.
///
/// Site ids are unique. Grids loaded from files are sorted by id; subsets
/// taken for tiles keep the original ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteGrid {
    sites: Vec<Site>,
    spacing_km: f64,
}

impl SiteGrid {
    pub fn new(sites: Vec<Site>, spacing_km: f64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &sites {
            if !seen.insert(s.id) {
                return Err(Error::Integrity(format!("duplicate site id {}", s.id)));
            }
            if !(-180.0..=180.0).contains(&s.lon) || !(-90.0..=90.0).contains(&s.lat) {
                return Err(Error::Integrity(format!(
                    "site {} has out-of-range coordinates ({}, {})",
                    s.id, s.lon, s.lat
                )));
            }
        }
        if !(spacing_km.is_finite() && spacing_km >= 0.0) {
            return Err(Error::Argument(format!("invalid grid spacing {spacing_km}")));
        }
        Ok(Self { sites, spacing_km })
    }

    /// Builds a grid whose pitch is the median nearest-neighbour distance.
    pub fn with_estimated_spacing(sites: Vec<Site>) -> Result<Self> {
        let spacing = median_nearest_neighbour_km(&sites);
        Self::new(sites, spacing)
    }

    /// Regular `nx × ny` lattice with `spacing_km` pitch, south-west corner at
    /// (`lon0`, `lat0`). Ids run row-major from 0.
    pub fn regular(lon0: f64, lat0: f64, nx: usize, ny: usize, spacing_km: f64) -> Result<Self> {
        let proj = crate::geo::LocalProjection::new(lon0, lat0);
        let mut sites = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                let (lon, lat) = proj.to_lonlat(ix as f64 * spacing_km, iy as f64 * spacing_km);
                sites.push(Site {
                    id: (iy * nx + ix) as u32,
                    lon,
                    lat,
                });
            }
        }
        Self::new(sites, spacing_km)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, index: usize) -> &Site {
        &self.sites[index]
    }

    pub fn spacing_km(&self) -> f64 {
        self.spacing_km
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.sites.iter().map(|s| s.id).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> SiteGrid {
        SiteGrid {
            sites: indices.iter().map(|&i| self.sites[i].clone()).collect(),
            spacing_km: self.spacing_km,
        }
    }

    pub fn distance_km(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (&self.sites[a], &self.sites[b]);
        great_circle_km(p.lon, p.lat, q.lon, q.lat)
    }

    /// (min lon, min lat, max lon, max lat).
    pub fn bbox(&self) -> Option<(f64, f64, f64, f64)> {
        if self.sites.is_empty() {
            return None;
        }
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in &self.sites {
            b.0 = b.0.min(s.lon);
            b.1 = b.1.min(s.lat);
            b.2 = b.2.max(s.lon);
            b.3 = b.3.max(s.lat);
        }
        Some(b)
    }
}

fn median_nearest_neighbour_km(sites: &[Site]) -> f64 {
    if sites.len() < 2 {
        return 0.0;
    }
    let mut nn: Vec<f64> = sites
        .iter()
        .enumerate()
        .map(|(i, a)| {
            sites
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| great_circle_km(a.lon, a.lat, b.lon, b.lat))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    nn[nn.len() / 2]
}

/// Ordered, duplicate-free list of calendar days.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarIndex {
    dates: Vec<NaiveDate>,
}

impl CalendarIndex {
    pub fn new(dates: Vec<NaiveDate>) -> Result<Self> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Integrity(
                "calendar dates must be strictly increasing".into(),
            ));
        }
        Ok(Self { dates })
    }

    /// `n_days` consecutive days starting at `start`.
    pub fn contiguous(start: NaiveDate, n_days: usize) -> Self {
        let dates = start.iter_days().take(n_days).collect();
        Self { dates }
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.dates[day]
    }

    pub fn month_of(&self, day: usize) -> u32 {
        self.dates[day].month()
    }

    pub fn doy_of(&self, day: usize) -> u32 {
        self.dates[day].ordinal()
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    pub fn subset(&self, days: &[usize]) -> CalendarIndex {
        CalendarIndex {
            dates: days.iter().map(|&d| self.dates[d]).collect(),
        }
    }
}

/// Dense hourly GHI array, `[site][day][hour]`, W/m².
#[derive(Clone, Debug, PartialEq)]
pub struct HourlyField {
    values: Vec<f64>,
    sites: SiteGrid,
    calendar: CalendarIndex,
}

impl HourlyField {
    pub fn filled(sites: SiteGrid, calendar: CalendarIndex, value: f64) -> Self {
        let n = sites.len() * calendar.len() * HOURS;
        Self {
            values: vec![value; n],
            sites,
            calendar,
        }
    }

    pub fn from_values(sites: SiteGrid, calendar: CalendarIndex, values: Vec<f64>) -> Result<Self> {
        if values.len() != sites.len() * calendar.len() * HOURS {
            return Err(Error::Argument(format!(
                "expected {} hourly values, got {}",
                sites.len() * calendar.len() * HOURS,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Integrity(format!("negative GHI value {v}")));
        }
        Ok(Self {
            values,
            sites,
            calendar,
        })
    }

    pub fn sites(&self) -> &SiteGrid {
        &self.sites
    }

    pub fn calendar(&self) -> &CalendarIndex {
        &self.calendar
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offset(&self, site: usize, day: usize) -> usize {
        (site * self.calendar.len() + day) * HOURS
    }

    pub fn get(&self, site: usize, day: usize, hour: usize) -> f64 {
        self.values[self.offset(site, day) + hour]
    }

    pub fn set(&mut self, site: usize, day: usize, hour: usize, value: f64) {
        let o = self.offset(site, day);
        self.values[o + hour] = value;
    }

    pub fn profile(&self, site: usize, day: usize) -> &[f64] {
        let o = self.offset(site, day);
        &self.values[o..o + HOURS]
    }

    pub fn profile_mut(&mut self, site: usize, day: usize) -> &mut [f64] {
        let o = self.offset(site, day);
        &mut self.values[o..o + HOURS]
    }

    pub fn is_complete(&self, site: usize, day: usize) -> bool {
        self.profile(site, day).iter().all(|v| !v.is_nan())
    }

    /// Restriction to a subset of sites and days (indices into this field).
    pub fn select(&self, sites: &[usize], days: &[usize]) -> HourlyField {
        let mut values = Vec::with_capacity(sites.len() * days.len() * HOURS);
        for &s in sites {
            for &d in days {
                values.extend_from_slice(self.profile(s, d));
            }
        }
        HourlyField {
            values,
            sites: self.sites.subset(sites),
            calendar: self.calendar.subset(days),
        }
    }

    /// True when both fields share sites and calendar.
    pub fn same_geometry(&self, other: &HourlyField) -> bool {
        self.sites == other.sites && self.calendar == other.calendar
    }
}

/// Daily-total GHI, `[site][day]`, Wh/m².
#[derive(Clone, Debug, PartialEq)]
pub struct DailyField {
    values: Vec<f64>,
    sites: SiteGrid,
    calendar: CalendarIndex,
}

impl DailyField {
    pub fn from_values(sites: SiteGrid, calendar: CalendarIndex, values: Vec<f64>) -> Result<Self> {
        if values.len() != sites.len() * calendar.len() {
            return Err(Error::Argument(format!(
                "expected {} daily values, got {}",
                sites.len() * calendar.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Integrity(format!("negative daily GHI value {v}")));
        }
        Ok(Self {
            values,
            sites,
            calendar,
        })
    }

    pub fn sites(&self) -> &SiteGrid {
        &self.sites
    }

    pub fn calendar(&self) -> &CalendarIndex {
        &self.calendar
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, site: usize, day: usize) -> f64 {
        self.values[site * self.calendar.len() + day]
    }

    pub fn select(&self, sites: &[usize], days: &[usize]) -> DailyField {
        let mut values = Vec::with_capacity(sites.len() * days.len());
        for &s in sites {
            for &d in days {
                values.push(self.get(s, d));
            }
        }
        DailyField {
            values,
            sites: self.sites.subset(sites),
            calendar: self.calendar.subset(days),
        }
    }
}

/// Sum of the 24 hourly values of each site-day; missing if any hour is.
pub fn to_daily(field: &HourlyField) -> DailyField {
    let values = field
        .values
        .chunks_exact(HOURS)
        .map(|p| p.iter().sum::<f64>())
        .collect();
    DailyField {
        values,
        sites: field.sites.clone(),
        calendar: field.calendar.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    /// Site index into the originating field.
    pub site: usize,
    /// Day index into the originating field.
    pub day: usize,
}

/// `k × 24` matrix of complete site-day profiles, rows site-major.
#[derive(Clone, Debug)]
pub struct ProfileMatrix {
    pub x: DMatrix<f64>,
    pub rows: Vec<RowMeta>,
    /// Site-days that passed the filters but had a missing hour.
    pub dropped: Vec<RowMeta>,
}

impl ProfileMatrix {
    pub fn from_rows(rows: Vec<RowMeta>, data: &[f64]) -> Self {
        let x = DMatrix::from_row_slice(rows.len(), HOURS, data);
        Self {
            x,
            rows,
            dropped: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Keeps rows for which `keep` returns true.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize, RowMeta) -> bool) -> ProfileMatrix {
        let idx: Vec<usize> = (0..self.rows.len()).filter(|&r| keep(r, self.rows[r])).collect();
        let x = self.x.select_rows(idx.iter());
        ProfileMatrix {
            x,
            rows: idx.iter().map(|&r| self.rows[r]).collect(),
            dropped: self.dropped.clone(),
        }
    }
}

/// Stacks complete site-day profiles passing both filters.
pub fn profile_matrix(
    field: &HourlyField,
    day_filter: impl Fn(NaiveDate) -> bool,
    site_filter: impl Fn(usize, &Site) -> bool,
) -> Result<ProfileMatrix> {
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    let mut data = Vec::new();
    let days: Vec<usize> = (0..field.n_days())
        .filter(|&d| day_filter(field.calendar.date(d)))
        .collect();
    for (s, site) in field.sites.sites().iter().enumerate() {
        if !site_filter(s, site) {
            continue;
        }
        for &d in &days {
            let meta = RowMeta { site: s, day: d };
            if field.is_complete(s, d) {
                rows.push(meta);
                data.extend_from_slice(field.profile(s, d));
            } else {
                dropped.push(meta);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySelection(
            "no complete site-day profile survives the filters".into(),
        ));
    }
    let mut pm = ProfileMatrix::from_rows(rows, &data);
    pm.dropped = dropped;
    Ok(pm)
}

/// Column names of the hourly file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub site_id: String,
    pub lon: String,
    pub lat: String,
    pub date: String,
    pub hour: String,
    pub ghi: String,
    pub clearsky: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            site_id: "site_id".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            date: "date".into(),
            hour: "hour".into(),
            ghi: "ghi".into(),
            clearsky: "clearsky_ghi".into(),
        }
    }
}

/// Contents of an hourly file: GHI plus the optional clearsky column.
#[derive(Clone, Debug, PartialEq)]
pub struct HourlyData {
    pub ghi: HourlyField,
    pub clearsky: Option<HourlyField>,
}

struct Columns {
    site_id: usize,
    lon: usize,
    lat: usize,
    date: usize,
    hour: usize,
    ghi: usize,
    clearsky: Option<usize>,
}

fn find_col(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("missing column `{name}`"),
        })
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

fn parse_value(raw: &str, what: &str, path: &Path, line: u64) -> Result<f64> {
    if raw.is_empty() || raw == NA {
        return Ok(MISSING);
    }
    raw.parse::<f64>().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("invalid {what} `{raw}`"),
    })
}

fn parse_required<T: std::str::FromStr>(raw: &str, what: &str, path: &Path, line: u64) -> Result<T> {
    raw.parse::<T>().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("invalid {what} `{raw}`"),
    })
}

fn parse_date(raw: &str, path: &Path, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("invalid date `{raw}` (expected YYYY-MM-DD)"),
    })
}

struct SiteTable {
    coords: BTreeMap<u32, (f64, f64)>,
}

impl SiteTable {
    fn new() -> Self {
        Self {
            coords: BTreeMap::new(),
        }
    }

    fn record(&mut self, id: u32, lon: f64, lat: f64, path: &Path, line: u64) -> Result<()> {
        match self.coords.get(&id) {
            Some(&(lo, la)) if (lo - lon).abs() > 1e-9 || (la - lat).abs() > 1e-9 => {
                Err(Error::Integrity(format!(
                    "{}:{line}: site {id} has inconsistent coordinates ({lon}, {lat}) vs ({lo}, {la})",
                    path.display()
                )))
            }
            Some(_) => Ok(()),
            None => {
                self.coords.insert(id, (lon, lat));
                Ok(())
            }
        }
    }

    fn into_grid(self) -> Result<SiteGrid> {
        let sites = self
            .coords
            .into_iter()
            .map(|(id, (lon, lat))| Site { id, lon, lat })
            .collect();
        SiteGrid::with_estimated_spacing(sites)
    }
}

/// Reads an hourly table (`site_id,lon,lat,date,hour,ghi[,clearsky_ghi]`).
pub fn load_hourly(path: impl AsRef<Path>, schema: &Schema) -> Result<HourlyData> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let cols = Columns {
        site_id: find_col(&headers, &schema.site_id, path)?,
        lon: find_col(&headers, &schema.lon, path)?,
        lat: find_col(&headers, &schema.lat, path)?,
        date: find_col(&headers, &schema.date, path)?,
        hour: find_col(&headers, &schema.hour, path)?,
        ghi: find_col(&headers, &schema.ghi, path)?,
        clearsky: headers.iter().position(|h| h == schema.clearsky),
    };

    let mut sites = SiteTable::new();
    let mut dates = BTreeSet::new();
    let mut cells: Vec<(u32, NaiveDate, usize, f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id: u32 = parse_required(field(cols.site_id), "site_id", path, line)?;
        let lon: f64 = parse_required(field(cols.lon), "lon", path, line)?;
        let lat: f64 = parse_required(field(cols.lat), "lat", path, line)?;
        let date = parse_date(field(cols.date), path, line)?;
        let hour: usize = parse_required(field(cols.hour), "hour", path, line)?;
        if !(1..=HOURS).contains(&hour) {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!("hour {hour} outside 1..=24"),
            });
        }
        let ghi = parse_value(field(cols.ghi), "ghi", path, line)?;
        if ghi < 0.0 {
            return Err(Error::Integrity(format!(
                "{}:{line}: negative GHI {ghi}",
                path.display()
            )));
        }
        let cs = match cols.clearsky {
            Some(c) => parse_value(field(c), "clearsky_ghi", path, line)?,
            None => MISSING,
        };
        if cs < 0.0 {
            return Err(Error::Integrity(format!(
                "{}:{line}: negative clearsky GHI {cs}",
                path.display()
            )));
        }
        sites.record(id, lon, lat, path, line)?;
        dates.insert(date);
        cells.push((id, date, hour - 1, ghi, cs));
    }

    let grid = sites.into_grid()?;
    let calendar = CalendarIndex::new(dates.into_iter().collect())?;
    let index: HashMap<u32, usize> = grid.sites().iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut ghi = HourlyField::filled(grid.clone(), calendar.clone(), MISSING);
    let mut clearsky = cols
        .clearsky
        .map(|_| HourlyField::filled(grid, calendar.clone(), MISSING));
    let mut written = vec![false; ghi.values.len()];
    for (id, date, h, g, cs) in cells {
        let s = index[&id];
        let d = calendar.position(date).expect("date registered above");
        let o = ghi.offset(s, d) + h;
        if std::mem::replace(&mut written[o], true) {
            return Err(Error::Integrity(format!(
                "duplicate observation for site {id} on {date} hour {}",
                h + 1
            )));
        }
        ghi.values[o] = g;
        if let Some(c) = clearsky.as_mut() {
            c.values[o] = cs;
        }
    }
    Ok(HourlyData { ghi, clearsky })
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        NA.to_string()
    } else {
        // `Display` for f64 is the shortest string that round-trips exactly.
        format!("{v}")
    }
}

/// Writes an hourly table in the format read by [`load_hourly`].
pub fn save_hourly(
    path: impl AsRef<Path>,
    field: &HourlyField,
    clearsky: Option<&HourlyField>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(cs) = clearsky {
        if !cs.same_geometry(field) {
            return Err(Error::Argument(
                "clearsky field geometry differs from GHI field".into(),
            ));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["site_id", "lon", "lat", "date", "hour", "ghi"];
    if clearsky.is_some() {
        header.push("clearsky_ghi");
    }
    let werr = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(werr)?;
    for (s, site) in field.sites.sites().iter().enumerate() {
        let (id, lon, lat) = (site.id.to_string(), fmt_value(site.lon), fmt_value(site.lat));
        for (d, date) in field.calendar.dates().iter().enumerate() {
            let date = date.format("%Y-%m-%d").to_string();
            for h in 0..HOURS {
                let hour = (h + 1).to_string();
                let ghi = fmt_value(field.get(s, d, h));
                let mut rec = vec![id.as_str(), lon.as_str(), lat.as_str(), date.as_str(), hour.as_str(), ghi.as_str()];
                let cs;
                if let Some(c) = clearsky {
                    cs = fmt_value(c.get(s, d, h));
                    rec.push(cs.as_str());
                }
                w.write_record(&rec).map_err(werr)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a daily table (`site_id,lon,lat,date,ghi_daily_total`).
pub fn load_daily(path: impl AsRef<Path>) -> Result<DailyField> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let c_id = find_col(&headers, "site_id", path)?;
    let c_lon = find_col(&headers, "lon", path)?;
    let c_lat = find_col(&headers, "lat", path)?;
    let c_date = find_col(&headers, "date", path)?;
    let c_val = find_col(&headers, "ghi_daily_total", path)?;

    let mut sites = SiteTable::new();
    let mut dates = BTreeSet::new();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id: u32 = parse_required(field(c_id), "site_id", path, line)?;
        let lon: f64 = parse_required(field(c_lon), "lon", path, line)?;
        let lat: f64 = parse_required(field(c_lat), "lat", path, line)?;
        let date = parse_date(field(c_date), path, line)?;
        let v = parse_value(field(c_val), "ghi_daily_total", path, line)?;
        if v < 0.0 {
            return Err(Error::Integrity(format!(
                "{}:{line}: negative daily GHI {v}",
                path.display()
            )));
        }
        sites.record(id, lon, lat, path, line)?;
        dates.insert(date);
        cells.push((id, date, v));
    }
    let grid = sites.into_grid()?;
    let calendar = CalendarIndex::new(dates.into_iter().collect())?;
    let index: HashMap<u32, usize> = grid.sites().iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut values = vec![MISSING; grid.len() * calendar.len()];
    for (id, date, v) in cells {
        let o = index[&id] * calendar.len() + calendar.position(date).expect("registered");
        values[o] = v;
    }
    DailyField::from_values(grid, calendar, values)
}

pub fn save_daily(path: impl AsRef<Path>, daily: &DailyField) -> Result<()> {
    let path = path.as_ref();
    let werr = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(werr)?;
    w.write_record(["site_id", "lon", "lat", "date", "ghi_daily_total"])
        .map_err(werr)?;
    for (s, site) in daily.sites.sites().iter().enumerate() {
        for (d, date) in daily.calendar.dates().iter().enumerate() {
            w.write_record([
                site.id.to_string(),
                fmt_value(site.lon),
                fmt_value(site.lat),
                date.format("%Y-%m-%d").to_string(),
                fmt_value(daily.get(s, d)),
            ])
            .map_err(werr)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a site list (`site_id,lon,lat`), e.g. a target grid for downscaling.
pub fn load_sites(path: impl AsRef<Path>) -> Result<SiteGrid> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let (c_id, c_lon, c_lat) = (
        find_col(&headers, "site_id", path)?,
        find_col(&headers, "lon", path)?,
        find_col(&headers, "lat", path)?,
    );
    let mut table = SiteTable::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id: u32 = parse_required(field(c_id), "site_id", path, line)?;
        let lon: f64 = parse_required(field(c_lon), "lon", path, line)?;
        let lat: f64 = parse_required(field(c_lat), "lat", path, line)?;
        table.record(id, lon, lat, path, line)?;
    }
    table.into_grid()
}

pub fn save_sites(path: impl AsRef<Path>, sites: &SiteGrid) -> Result<()> {
    let path = path.as_ref();
    let werr = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(werr)?;
    w.write_record(["site_id", "lon", "lat"]).map_err(werr)?;
    for s in sites.sites() {
        w.write_record([s.id.to_string(), fmt_value(s.lon), fmt_value(s.lat)])
            .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn one_site_day(ghi: impl Fn(usize) -> String) -> String {
        let mut s = String::from("site_id,lon,lat,date,hour,ghi\n");
        for h in 1..=24 {
            s.push_str(&format!("0,-105,40,2020-06-01,{h},{}\n", ghi(h)));
        }
        s
    }

    #[test]
    fn all_dark_day_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "h.csv", &one_site_day(|_| "0".into()));
        let data = load_hourly(&p, &Schema::default()).unwrap();
        assert_eq!(data.ghi.n_sites(), 1);
        assert_eq!(data.ghi.n_days(), 1);
        assert!(data.ghi.values().iter().all(|v| *v == 0.0));
        assert!(data.clearsky.is_none());
    }

    #[test]
    fn missing_hour_is_marked_and_dropped_from_profiles() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = one_site_day(|h| if h == 13 { "NA".into() } else { "5".into() });
        let p = write_file(&dir, "h.csv", &body);
        let f = load_hourly(&p, &Schema::default()).unwrap().ghi;
        assert!(f.get(0, 0, 12).is_nan());
        assert!(!f.is_complete(0, 0));
        let err = profile_matrix(&f, |_| true, |_, _| true).unwrap_err();
        assert!(matches!(err, Error::EmptySelection(_)));

        // An absent row is missing too.
        let body: String = one_site_day(|_| "5".into())
            .lines()
            .filter(|l| !l.contains(",13,"))
            .map(|l| format!("{l}\n"))
            .collect();
        let p = write_file(&dir, "h2.csv", &body);
        let f = load_hourly(&p, &Schema::default()).unwrap().ghi;
        assert!(f.get(0, 0, 12).is_nan());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let body = one_site_day(|h| if h == 5 { "abc".into() } else { "1".into() });
        let p = write_file(&dir, "h.csv", &body);
        match load_hourly(&p, &Schema::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 6),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn integrity_errors() {
        let dir = tempfile::tempdir().unwrap();
        let body = one_site_day(|h| if h == 5 { "-1".into() } else { "1".into() });
        let p = write_file(&dir, "neg.csv", &body);
        assert!(matches!(
            load_hourly(&p, &Schema::default()),
            Err(Error::Integrity(_))
        ));
        let mut body = one_site_day(|_| "1".into());
        body.push_str("0,-104,40,2020-06-02,1,1\n");
        let p = write_file(&dir, "coords.csv", &body);
        assert!(matches!(
            load_hourly(&p, &Schema::default()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn constant_day_total() {
        let sites = SiteGrid::new(vec![Site { id: 0, lon: 0.0, lat: 0.0 }], 20.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 2);
        let mut f = HourlyField::filled(sites, cal, 100.0);
        for h in 0..HOURS {
            f.set(0, 1, h, MISSING);
        }
        let d = to_daily(&f);
        assert_eq!(d.get(0, 0), 2400.0);
        assert!(d.get(0, 1).is_nan());
    }

    #[test]
    fn profile_matrix_counts_and_ordering() {
        let sites = SiteGrid::regular(-105.0, 40.0, 2, 1, 20.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(), 3);
        let mut f = HourlyField::filled(sites, cal, 1.0);
        let pm = profile_matrix(&f, |_| true, |_, _| true).unwrap();
        assert_eq!((pm.x.nrows(), pm.x.ncols()), (6, 24));
        let order: Vec<(usize, usize)> = pm.rows.iter().map(|r| (r.site, r.day)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);

        f.set(1, 2, 7, MISSING);
        let pm = profile_matrix(&f, |_| true, |_, _| true).unwrap();
        assert_eq!(pm.n_rows(), 5);
        assert_eq!(pm.dropped, vec![RowMeta { site: 1, day: 2 }]);

        let june_only = profile_matrix(&f, |d| d.month() == 7, |_, _| true);
        assert!(june_only.is_err());
    }

    #[test]
    fn calendar_rejects_unordered_dates() {
        let a = NaiveDate::from_ymd_opt(2020, 1, 2).unwrap();
        let b = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        assert!(CalendarIndex::new(vec![a, b]).is_err());
        assert!(CalendarIndex::new(vec![a, a]).is_err());
    }

    #[test]
    fn daily_and_sites_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sites = SiteGrid::regular(-105.0, 40.0, 3, 2, 20.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2021, 3, 30).unwrap(), 4);
        let vals: Vec<f64> = (0..24).map(|i| i as f64 * 123.456 + 0.1).collect();
        let daily = DailyField::from_values(sites.clone(), cal, vals).unwrap();
        let p = dir.path().join("d.csv");
        save_daily(&p, &daily).unwrap();
        let back = load_daily(&p).unwrap();
        assert_eq!(back.values(), daily.values());
        assert_eq!(back.sites().sites(), sites.sites());

        let p = dir.path().join("s.csv");
        save_sites(&p, &sites).unwrap();
        assert_eq!(load_sites(&p).unwrap().sites(), sites.sites());
    }
}
