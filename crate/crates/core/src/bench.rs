//! Wall-clock timing of the two inference stages across image sizes.

use std::time::Instant;

use crate::coeffnet::ModelParams;
use crate::error::{Error, Result};
use crate::pipeline::{predict_grid, render_with};
use crate::reference::synth_image;

/// Sizes timed by default, in megapixels. The pairs (1, 4) and (3, 12)
/// give two quadrupling ratios.
pub const DEFAULT_SIZES: [f64; 4] = [1.0, 3.0, 4.0, 12.0];

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub megapixels: f64,
    pub width: usize,
    pub height: usize,
    /// Downsample plus coefficient prediction.
    pub lowres_ms: f64,
    /// Guide, slice and apply at full resolution.
    pub render_ms: f64,
}

/// 4:3 extents with about `mp` million pixels.
pub fn extents(mp: f64) -> (usize, usize) {
    let w = (mp * 1e6 * 4.0 / 3.0).sqrt().round() as usize;
    let h = ((mp * 1e6) / w as f64).round() as usize;
    (h.max(1), w.max(1))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median over `repeats` runs of each stage at each size.
pub fn run(model: &ModelParams<f32>, sizes: &[f64], repeats: usize) -> Result<Vec<BenchRow>> {
    let repeats = repeats.max(1);
    sizes
        .iter()
        .map(|&mp| {
            let (h, w) = extents(mp);
            let img = synth_image(h, w, 1);
            let mut low = Vec::new();
            let mut full = Vec::new();
            // One warm-up pass.
            let grid = predict_grid(model, &img)?;
            render_with(model, &grid, &img)?;
            for _ in 0..repeats {
                let t = Instant::now();
                let grid = predict_grid(model, &img)?;
                low.push(t.elapsed().as_secs_f64() * 1e3);
                let t = Instant::now();
                std::hint::black_box(render_with(model, &grid, &img)?);
                full.push(t.elapsed().as_secs_f64() * 1e3);
            }
            Ok(BenchRow {
                megapixels: mp,
                width: w,
                height: h,
                lowres_ms: median(low),
                render_ms: median(full),
            })
        })
        .collect()
}

/// `render(4N) / render(N)` for every `N` whose quadruple was also timed,
/// normalized by the exact pixel-count ratio.
pub fn quadrupling_ratios(rows: &[BenchRow]) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|a| {
            let b = rows.iter().find(|b| (b.megapixels - 4.0 * a.megapixels).abs() < 1e-9)?;
            let px = (b.width * b.height) as f64 / (a.width * a.height) as f64;
            Some((a.megapixels, b.render_ms / a.render_ms * 4.0 / px))
        })
        .collect()
}

/// Sets the global thread count: `threads`, else `BGNET_THREADS`, else the
/// library default. Only the first call has an effect.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("BGNET_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| Error::Config(format!("BGNET_THREADS={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
