//! Prints voxel and pixel calibration of the standard simulator fixture for
//! every fixed fusion strategy, at the fixture's τ* and at τ* = 1, together
//! with the temperatures found by 2D and 3D calibration of RBU.

use std::time::Instant;

use semfuse::exec::Exec;
use semfuse::fusion::Strategy;
use semfuse::metrics::{summarize, DEFAULT_BINS};
use semfuse::pipeline::{fuse_scene, FuseOptions};
use semfuse::scaling::{
    calibrate_2d, calibrate_3d, CalibrationObjective, PixelSet, ScalingMode, SearchOptions,
};
use semfuse::simulator::{simulate, SceneSpec, SegmenterSpec};

fn main() -> semfuse::Result<()> {
    let spec = SceneSpec::standard();
    for tau_star in [SegmenterSpec::standard().tau_star, 1.0] {
        let seg = SegmenterSpec {
            tau_star,
            ..SegmenterSpec::standard()
        };
        let t = Instant::now();
        let sim = simulate(&spec, &seg, Exec::default())?;
        let pixels = PixelSet::from_scenes(std::slice::from_ref(&sim.scene), 1)?;
        let p = summarize(&pixels.predictions(None, Exec::default())?, DEFAULT_BINS)?;
        println!(
            "tau*={tau_star}: simulated in {:.1}s; pixel mECE {:.4} ECE {:.4} mIoU {:.4}",
            t.elapsed().as_secs_f64(),
            p.mece,
            p.ece,
            p.miou
        );

        let mut opts = FuseOptions::new(Strategy::Rbu);
        opts.caching = true;
        let cache = fuse_scene(&sim.scene, &opts)?.cache("fixture")?;
        let objective = CalibrationObjective::default();
        let search = SearchOptions::default();
        let c3 = calibrate_3d(&[cache], &objective, ScalingMode::Temperature, &search)?;
        let c2 = calibrate_2d(
            std::slice::from_ref(&sim.scene),
            &objective,
            ScalingMode::Temperature,
            &search,
        )?;
        println!(
            "  3D tau {:.3}: mECE {:.4} -> {:.4} ({:.1}%); 2D tau {:.3}",
            c3.params.tau[0],
            c3.identity_value,
            c3.value,
            100.0 * (1.0 - c3.value / c3.identity_value),
            c2.params.tau[0]
        );

        for s in Strategy::FIXED {
            let t = Instant::now();
            let map = fuse_scene(&sim.scene, &FuseOptions::new(s))?;
            let m = summarize(&map.predictions()?, DEFAULT_BINS)?;
            println!(
                "  {s:8} voxels {:6}  mECE {:.4}  ECE {:.4}  TL-ECE {:.4}  Brier {:.4}  NLL {:.3}  mIoU {:.4}  ({:.1}s)",
                m.count,
                m.mece,
                m.ece,
                m.tl_ece,
                m.brier,
                m.nll,
                m.miou,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
