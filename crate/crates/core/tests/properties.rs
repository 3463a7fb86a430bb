//! Property tests over the public API: archives, metrics, compressors and
//! training reproducibility.

use std::sync::Arc;

use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use seaice_core::backbones::{BackboneConfig, BackboneKind, LatentForecaster};
use seaice_core::grid::{
    compute_climatology, read_archive, sea_ice_extent, synth_archive, write_archive, CellKind,
    DateRange, GridArchive, Mask, SicGrid, SynthConfig,
};
use seaice_core::latent::{Codec, Compressor, LatentSeries};
use seaice_core::metrics::{acc, mae, mse, nse, r2, rmse, ssim, Sample, Score};

fn day(i: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2003, 2, 20).unwrap() + Days::new(i)
}

fn mask_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(
        prop_oneof![8 => Just(0u8), 1 => Just(1u8), 1 => Just(2u8)],
        rows * cols,
    )
    .prop_map(move |codes| {
        let mut cells: Vec<CellKind> = codes
            .iter()
            .map(|c| CellKind::from_code(*c).unwrap())
            .collect();
        cells[0] = CellKind::Ocean;
        Mask::new(rows, cols, cells).unwrap()
    })
}

/// Mask plus `n` fields of values in `[0, 1]`.
fn fields(n: usize) -> impl Strategy<Value = (Mask, Vec<Vec<f32>>)> {
    mask_strategy(8, 8).prop_flat_map(move |m| {
        let f = prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 64), n);
        (Just(m), f)
    })
}

fn score(s: Score) -> Option<f64> {
    s.value()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn archive_round_trip_is_bit_exact((mask, vals) in fields(4), area in 1.0f64..1000.0) {
        let mask = Arc::new(mask);
        let grids: Vec<SicGrid> = vals
            .into_iter()
            .enumerate()
            .map(|(i, v)| SicGrid::new(day(i as u64), v, mask.clone()).unwrap())
            .collect();
        let a = GridArchive::new(mask, grids, vec![false; 4], area).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_archive(&a, dir.path()).unwrap();
        let b = read_archive(dir.path()).unwrap();
        prop_assert_eq!(b.grids(), a.grids());
        prop_assert_eq!(b.cell_area_km2.to_bits(), a.cell_area_km2.to_bits());
    }

    #[test]
    fn extent_falls_as_the_threshold_rises((mask, vals) in fields(1), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
        let g = SicGrid::new(day(0), vals[0].clone(), Arc::new(mask)).unwrap();
        prop_assert!(sea_ice_extent(&g, t + dt, 625.0) <= sea_ice_extent(&g, t, 625.0));
    }

    #[test]
    fn metric_identities_hold((mask, vals) in fields(6)) {
        let samples: Vec<Sample> = (0..3).map(|k| Sample::new(&vals[2 * k], &vals[2 * k + 1])).collect();
        let m = mse(&samples, &mask).unwrap();
        let r = rmse(&samples, &mask).unwrap();
        prop_assert!((m - r * r).abs() < 1e-14);
        prop_assert!(mae(&samples, &mask).unwrap() <= r + 1e-15);
        if let Some(v) = score(nse(&samples, &mask).unwrap()) { prop_assert!(v <= 1.0); }
        if let Some(v) = score(r2(&samples, &mask).unwrap()) { prop_assert!(v <= 1.0); }
        let clim = vec![0.5f32; 64];
        let clims: Vec<&[f32]> = vec![&clim; 3];
        if let Some(v) = score(acc(&samples, &clims, &mask).unwrap().score) { prop_assert!((-1.0..=1.0).contains(&v)); }
        if let Some(v) = score(ssim(&samples, &mask).unwrap()) { prop_assert!((-1.0..=1.0).contains(&v)); }
    }

    #[test]
    fn metrics_ignore_non_ocean_cells((mask, vals) in fields(2), junk in prop::collection::vec(-1e6f32..1e6, 64)) {
        let dirty = |v: &[f32]| -> Vec<f32> {
            v.iter().zip(&junk).enumerate().map(|(i, (x, j))| if mask.is_ocean(i) { *x } else { *j }).collect()
        };
        let (p, t) = (dirty(&vals[0]), dirty(&vals[1]));
        let clean = [Sample::new(&vals[0], &vals[1])];
        let noisy = [Sample::new(&p, &t)];
        let clim = vec![0.3f32; 64];
        prop_assert_eq!(mse(&clean, &mask).unwrap().to_bits(), mse(&noisy, &mask).unwrap().to_bits());
        prop_assert_eq!(mae(&clean, &mask).unwrap().to_bits(), mae(&noisy, &mask).unwrap().to_bits());
        prop_assert_eq!(nse(&clean, &mask).unwrap(), nse(&noisy, &mask).unwrap());
        prop_assert_eq!(r2(&clean, &mask).unwrap(), r2(&noisy, &mask).unwrap());
        prop_assert_eq!(ssim(&clean, &mask).unwrap(), ssim(&noisy, &mask).unwrap());
        prop_assert_eq!(
            acc(&clean, &[&clim], &mask).unwrap(),
            acc(&noisy, &[&clim], &mask).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_values_stay_in_range(
        seed in 0u64..1000,
        amp in 0.0f64..0.8,
        noise in 0.0f64..0.3,
        trend in -0.05f64..0.05,
    ) {
        let cfg = SynthConfig {
            rows: 9,
            cols: 7,
            n_days: 400,
            seasonal_amp: amp,
            noise_sd: noise,
            trend_per_year: trend,
            seed,
            ..SynthConfig::default()
        };
        let a = synth_archive(&cfg).unwrap();
        prop_assert!(a.grids().iter().all(|g| g.ocean_values().all(|v| (0.0..=1.0).contains(&v))));
    }
}

#[test]
fn climatology_ignores_year_order() {
    let cfg = SynthConfig {
        n_days: 730,
        start: NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
        ..SynthConfig::default()
    };
    let a = synth_archive(&cfg).unwrap();
    let mask = a.mask().clone();
    // Same two years of fields, stored in the opposite order.
    let (y1, y2) = a.grids().split_at(365);
    let swapped: Vec<SicGrid> = y2
        .iter()
        .chain(y1)
        .enumerate()
        .map(|(i, g)| {
            SicGrid::new(
                cfg.start + Days::new(i as u64),
                g.values().to_vec(),
                mask.clone(),
            )
            .unwrap()
        })
        .collect();
    let b = GridArchive::new(mask, swapped, vec![false; 730], a.cell_area_km2).unwrap();
    let range = DateRange::new(cfg.start, cfg.start + Days::new(729)).unwrap();
    let ca = compute_climatology(&a, range).unwrap();
    let cb = compute_climatology(&b, range).unwrap();
    for doy in 1..=365 {
        let (fa, fb) = (ca.field_by_doy(doy).unwrap(), cb.field_by_doy(doy).unwrap());
        assert!(
            fa.iter().zip(fb).all(|(x, y)| x.to_bits() == y.to_bits()),
            "doy {doy}"
        );
    }
}

#[test]
fn compressors_never_read_non_ocean_cells() {
    let cfg = SynthConfig {
        pole_hole_radius: 2,
        n_days: 200,
        ..SynthConfig::default()
    };
    let a = synth_archive(&cfg).unwrap();
    let range = DateRange::new(cfg.start, cfg.start + Days::new(199)).unwrap();
    let eof = Compressor::fit_eof(&a, range, 5).unwrap();
    let g = &a.grids()[17];
    let junk: Vec<f32> = g
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| if a.mask().is_ocean(i) { *v } else { 1e9 })
        .collect();
    let dirty = SicGrid::from_raw(g.date, junk, a.mask().clone());
    let z = eof.encode(g).unwrap();
    assert_eq!(z, eof.encode(&dirty).unwrap());
    let back = eof.decode(&z, g.date).unwrap();
    for (i, v) in back.values().iter().enumerate() {
        assert_eq!(a.mask().is_ocean(i), !v.is_nan());
    }
}

#[test]
fn training_has_no_hidden_state() {
    let cfg = SynthConfig {
        n_days: 500,
        ..SynthConfig::default()
    };
    let a = synth_archive(&cfg).unwrap();
    let train = DateRange::new(cfg.start, cfg.start + Days::new(349)).unwrap();
    let val = DateRange::new(cfg.start + Days::new(350), cfg.start + Days::new(499)).unwrap();
    let all = DateRange::new(cfg.start, cfg.start + Days::new(499)).unwrap();
    let eof = Compressor::fit_eof(&a, train, 4).unwrap();
    let s = LatentSeries::encode(&eof, "eof", &a, all, train).unwrap();
    let fit = |kind| {
        let bc = BackboneConfig {
            max_epochs: 2,
            sample_stride: 4,
            seed: 11,
            ..BackboneConfig::new(kind)
        };
        LatentForecaster::fit(&s, train, val, &bc).unwrap()
    };
    let first = fit(BackboneKind::DLinear);
    let _other = fit(BackboneKind::SciNet);
    let again = fit(BackboneKind::DLinear);
    let w: Vec<f64> = s.vectors()[40 * 4..55 * 4].to_vec();
    let (x, y) = (
        first.forecast(&w, s.dates[40]).unwrap(),
        again.forecast(&w, s.dates[40]).unwrap(),
    );
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(first.report, again.report);
}
