//! Scenario files: a TOML tree mirroring [`Scenario`].
//!
//! ```toml
//! [rf]
//! frequency = 27e9
//! [ue]
//! pos = [250.0, 450.0, 0.0]
//! vel = [-10.0, 2.0, 5.0]
//! [[bs]]
//! pos = [235.504, 389.504, 26.0]
//! [[scatterers]]
//! pos = [247.0, 400.0, 6.0]
//! bs_index = 1
//! [scatterers.surface]
//! kind = "ris"
//! rows = 40
//! cols = 40
//! element_size = [0.0044, 0.0044]
//! normal = [0.0, 0.0, 1.0]
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{Rf, Scatterer, Scenario, Vec3, SPEED_OF_LIGHT};
use crate::scattering::{orientation_from_normal, SurfaceArray, SurfaceKind};

pub const TABLES23: &str = include_str!("../scenarios/tables23.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    rf: RfFile,
    ue: UeFile,
    bs: Vec<BsFile>,
    #[serde(default)]
    scatterers: Vec<ScattererFile>,
    #[serde(default)]
    clock_bias: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RfFile {
    frequency: f64,
    speed: Option<f64>,
    wavelength: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UeFile {
    pos: [f64; 3],
    #[serde(default)]
    vel: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BsFile {
    pos: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScattererFile {
    pos: [f64; 3],
    #[serde(default)]
    vel: [f64; 3],
    bs_index: usize,
    surface: Option<SurfaceFile>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurfaceFile {
    kind: SurfaceKind,
    rows: usize,
    cols: usize,
    element_size: [f64; 2],
    #[serde(default = "one")]
    reflect_coeff: f64,
    #[serde(default = "one")]
    pattern_exponent: f64,
    normal: [f64; 3],
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let speed = file.rf.speed.unwrap_or(SPEED_OF_LIGHT);
    if !(file.rf.frequency > 0.0) {
        return Err(Error::InvalidScenario { field: "rf.frequency".into(), reason: "must be positive".into() });
    }
    let rf =
        Rf { frequency: file.rf.frequency, wavelength: file.rf.wavelength.unwrap_or(speed / file.rf.frequency), speed };
    let mut scatterers = Vec::with_capacity(file.scatterers.len());
    for (i, s) in file.scatterers.into_iter().enumerate() {
        if s.bs_index == 0 || s.bs_index > file.bs.len() {
            return Err(Error::InvalidScenario {
                field: format!("scatterers[{i}].bs_index"),
                reason: format!("must lie in [1, {}], got {}", file.bs.len(), s.bs_index),
            });
        }
        let pos = v3(s.pos);
        let surface = match s.surface {
            None => None,
            Some(f) => {
                let mut surf = SurfaceArray::new(f.kind, f.rows, f.cols, f.element_size[0], f.element_size[1]);
                surf.reflect_coeff = f.reflect_coeff;
                surf.pattern_exponent = f.pattern_exponent;
                surf.center = pos;
                surf.orientation = orientation_from_normal(&v3(f.normal)).map_err(|e| Error::InvalidScenario {
                    field: format!("scatterers[{i}].surface.normal"),
                    reason: e.to_string(),
                })?;
                Some(surf)
            }
        };
        scatterers.push(Scatterer { pos, vel: v3(s.vel), bs: s.bs_index - 1, surface });
    }
    let sc = Scenario {
        bs: file.bs.iter().map(|b| v3(b.pos)).collect(),
        ue_pos: v3(file.ue.pos),
        ue_vel: v3(file.ue.vel),
        scatterers,
        rf,
        clock_bias: file.clock_bias,
    };
    sc.validate()?;
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

/// The six-BS, eighteen-scatterer reference world with the default UE state.
pub fn tables23() -> Scenario {
    parse_scenario(TABLES23).expect("bundled scenario is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tables() {
        let sc = tables23();
        assert_eq!(sc.n_bs(), 6);
        assert_eq!(sc.n_scatterers(), 18);
        assert_eq!(sc.bs[0], Vec3::new(235.504, 389.504, 26.0));
        assert_eq!(sc.bs[5], Vec3::new(287.504, 589.504, 50.0));
        assert_eq!(sc.scatterers[0].pos, Vec3::new(247.0, 400.0, 6.0));
        assert_eq!(sc.scatterers[0].bs, 0);
        assert_eq!(sc.scatterers[17].pos, Vec3::new(264.0, 444.0, 8.0));
        assert_eq!(sc.scatterers[17].bs, 5);
        assert_eq!(sc.ue_pos, Vec3::new(250.0, 450.0, 0.0));
        assert_eq!(sc.ue_vel, Vec3::new(-10.0, 2.0, 5.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = TABLES23.replace("[ue]", "[ue]\ncolour = 3");
        match parse_scenario(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("colour"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_bs_index_names_the_field() {
        let text = TABLES23.replacen("bs_index = 3", "bs_index = 9", 1);
        match parse_scenario(&text) {
            Err(Error::InvalidScenario { field, .. }) => assert_eq!(field, "scatterers[2].bs_index"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_wavelength_is_rejected() {
        let text = TABLES23.replace("frequency = 27e9", "frequency = 27e9\nwavelength = 0.011");
        match parse_scenario(&text) {
            Err(Error::InvalidScenario { field, .. }) => assert_eq!(field, "rf.wavelength"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn surfaces_parse_and_far_field_is_checked() {
        let base = "[rf]\nfrequency = 27e9\n[ue]\npos = [0.0, 0.0, 0.0]\n[[bs]]\npos = [100.0, 0.0, 20.0]\n";
        let surf = |x: f64| {
            format!(
                "{base}[[scatterers]]\npos = [{x}, 30.0, 5.0]\nbs_index = 1\n[scatterers.surface]\nkind = \"ris\"\nrows = 40\ncols = 40\nelement_size = [0.0044, 0.0044]\nnormal = [0.0, -1.0, 0.0]\n"
            )
        };
        let sc = parse_scenario(&surf(50.0)).unwrap();
        let s = sc.scatterers[0].surface.as_ref().unwrap();
        assert_eq!(s.kind, SurfaceKind::Ris);
        assert!((s.normal() - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        assert_eq!(s.center, sc.scatterers[0].pos);
        // 2D²/λ ≈ 11 m for this plate: a UE 5 m away violates it.
        let close = surf(1.0).replace("pos = [0.0, 0.0, 0.0]", "pos = [1.0, 30.0, 0.0]");
        match parse_scenario(&close) {
            Err(Error::InvalidScenario { field, reason }) => {
                assert_eq!(field, "scatterers[0].surface");
                assert!(reason.contains("far-field"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
