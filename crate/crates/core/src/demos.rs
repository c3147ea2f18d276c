//! Fingertip demonstrations: retargeting from human hand dimensions, phase
//! interpolation, grasp styles, procedural synthesis and the `.demo` text
//! format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand::{Finger, HandModel, JointVector, JOINTS_PER_FINGER, NUM_FINGERS};

pub const DEMO_FORMAT_VERSION: u32 = 1;
pub const SYNTH_FRAMES: usize = 50;

/// Palm-frame point the synthesized grasps close around.
pub const GRASP_CENTER: [f64; 3] = [0.0, 0.0, -0.05];

/// Closed fingertips stop this far from the grasp center.
const CLOSED_STANDOFF: f64 = 0.03;
/// Phase at which synthesized demos start closing.
const CLOSE_ONSET: f64 = 0.3;
const IK_TOLERANCE: f64 = 2e-3;
/// Extra IK starting points; curled configurations escape the local minima
/// of reaching back under the mount.
const IK_SEEDS: [[f64; 4]; 3] = [[0.0, 1.6, 1.2, 0.4], [0.0, 1.0, 1.0, 1.0], [0.0, 1.4, 1.4, 0.6]];

const STYLES_TOML: &str = include_str!("../data/styles.toml");

/// A grasp style: the subset of fingers the demonstration closes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub id: String,
    /// Order: index, middle, ring, thumb.
    pub active_fingers: [bool; NUM_FINGERS],
}

impl StyleSpec {
    pub fn new(id: impl Into<String>, active_fingers: [bool; NUM_FINGERS]) -> Result<Self> {
        let s = StyleSpec {
            id: id.into(),
            active_fingers,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn all_fingers() -> Self {
        StyleSpec {
            id: "all".into(),
            active_fingers: [true; NUM_FINGERS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(char::is_whitespace) {
            return Err(Error::input(format!("style id '{}' must be a non-empty token", self.id)));
        }
        let others = self.active_fingers[..3].iter().filter(|&&a| a).count();
        if !self.active_fingers[Finger::Thumb.index()] || others == 0 {
            return Err(Error::input(format!(
                "style '{}' must use the thumb and at least one other finger",
                self.id
            )));
        }
        Ok(())
    }

    pub fn is_active(&self, f: Finger) -> bool {
        self.active_fingers[f.index()]
    }

    pub fn finger_count(&self) -> usize {
        self.active_fingers.iter().filter(|&&a| a).count()
    }
}

#[derive(Deserialize)]
struct StylesFile {
    styles: Vec<StyleSpec>,
}

/// The six bundled styles: all fingers plus the thumb-and-subset variants.
pub fn shipped_styles() -> Vec<StyleSpec> {
    parse_styles(STYLES_TOML).expect("bundled styles are valid")
}

pub fn parse_styles(text: &str) -> Result<Vec<StyleSpec>> {
    let f: StylesFile = toml::from_str(text).map_err(|e| Error::format("styles", e))?;
    for s in &f.styles {
        s.validate()?;
    }
    Ok(f.styles)
}

pub fn find_style(id: &str) -> Result<StyleSpec> {
    shipped_styles()
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::input(format!("unknown style '{id}'")))
}

/// Time-indexed target fingertip positions in the palm frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoTrajectory {
    pub frames: Vec<[Vector3<f64>; NUM_FINGERS]>,
    /// Strictly increasing from 0 to 1, one entry per frame.
    pub phase: Vec<f64>,
    pub style: StyleSpec,
    /// Kinematic chain length of each demonstrating finger (m).
    pub source_scale: [f64; NUM_FINGERS],
}

impl DemoTrajectory {
    pub fn new(
        frames: Vec<[Vector3<f64>; NUM_FINGERS]>,
        phase: Vec<f64>,
        style: StyleSpec,
        source_scale: [f64; NUM_FINGERS],
    ) -> Result<Self> {
        let d = DemoTrajectory {
            frames,
            phase,
            style,
            source_scale,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t < 2 {
            return Err(Error::input("demonstration needs at least 2 frames"));
        }
        if self.phase.len() != t {
            return Err(Error::Dimension {
                what: "demo phase",
                expected: t,
                got: self.phase.len(),
            });
        }
        if self.phase[0] != 0.0 || self.phase[t - 1] != 1.0 || self.phase.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::input("demo phase must increase strictly from 0 to 1"));
        }
        if self.frames.iter().flatten().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::input("demo frames must be finite"));
        }
        self.style.validate()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Uniform phase grid k / (T - 1).
    pub fn uniform_phase(t: usize) -> Vec<f64> {
        (0..t).map(|k| k as f64 / (t - 1) as f64).collect()
    }
}

/// Rescales every fingertip radially in the palm frame by the ratio of robot
/// to human chain length of its finger.
pub fn retarget_demo(demo: &DemoTrajectory, model: &HandModel) -> Result<DemoTrajectory> {
    if demo.source_scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::input("source_scale entries must be positive"));
    }
    let ratios: [f64; NUM_FINGERS] =
        Finger::ALL.map(|f| model.chain(f).chain_length() / demo.source_scale[f.index()]);
    let frames = demo
        .frames
        .iter()
        .map(|fr| std::array::from_fn(|i| fr[i] * ratios[i]))
        .collect();
    Ok(DemoTrajectory {
        frames,
        phase: demo.phase.clone(),
        style: demo.style.clone(),
        source_scale: Finger::ALL.map(|f| model.chain(f).chain_length()),
    })
}

/// Fingertip targets at `phase`, linearly interpolated between frames.
pub fn demo_target(demo: &DemoTrajectory, phase: f64) -> Result<[Vector3<f64>; NUM_FINGERS]> {
    if !(0.0..=1.0).contains(&phase) {
        return Err(Error::input(format!("demo phase {phase} outside [0, 1]")));
    }
    let last = demo.frames.len() - 1;
    if phase <= demo.phase[0] {
        return Ok(demo.frames[0]);
    }
    if phase >= demo.phase[last] {
        return Ok(demo.frames[last]);
    }
    // first index with phase[i] > phase
    let hi = demo.phase.partition_point(|&p| p <= phase);
    let lo = hi - 1;
    let t = (phase - demo.phase[lo]) / (demo.phase[hi] - demo.phase[lo]);
    let (a, b) = (&demo.frames[lo], &demo.frames[hi]);
    Ok(std::array::from_fn(|i| a[i] * (1.0 - t) + b[i] * t))
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Damped least-squares IK for one finger; returns the joint angles and the
/// remaining position error.
fn solve_finger_ik(model: &HandModel, f: Finger, target: &Vector3<f64>, start: &[f64]) -> ([f64; 4], f64) {
    let chain = model.chain(f);
    let limits: Vec<[f64; 2]> = chain.joints.iter().map(|j| j.limits).collect();
    let mut q = [start[0], start[1], start[2], start[3]];
    let damping = 1e-3;
    for _ in 0..400 {
        let tip = chain.tip_in_palm(&q);
        let err = target - tip;
        if err.norm() < 1e-6 {
            break;
        }
        let mut jac = Matrix3x4::zeros();
        for j in 0..JOINTS_PER_FINGER {
            let h = 1e-7;
            let mut qp = q;
            qp[j] += h;
            let d = (chain.tip_in_palm(&qp) - tip) / h;
            jac.set_column(j, &d);
        }
        let jjt = jac * jac.transpose() + Matrix3::identity() * damping;
        let Some(inv) = jjt.try_inverse() else { break };
        let dq: Vector4<f64> = jac.transpose() * inv * err;
        for j in 0..JOINTS_PER_FINGER {
            q[j] = (q[j] + dq[j].clamp(-0.2, 0.2)).clamp(limits[j][0], limits[j][1]);
        }
    }
    let resid = (target - chain.tip_in_palm(&q)).norm();
    (q, resid)
}

/// Closed-grasp fingertip target for a finger: in the finger's own lane,
/// just short of the grasp center on the mount's side.
fn closed_target(model: &HandModel, f: Finger) -> Vector3<f64> {
    let center = Vector3::from(GRASP_CENTER);
    let mount = model.chain(f).mount_position();
    Vector3::new(center.x + (mount.x - center.x).signum() * CLOSED_STANDOFF, mount.y, center.z)
}

/// Builds an open-to-closed demonstration for `style`, reachable by `model`.
/// Inactive fingers stay at the open pose for the whole trajectory.
pub fn synthesize_demo(style: &StyleSpec, model: &HandModel) -> Result<DemoTrajectory> {
    style.validate()?;
    let open = model.open_pose;
    let mut closed = open;
    for f in Finger::ALL.into_iter().filter(|&f| style.is_active(f)) {
        let target = closed_target(model, f);
        let (q, resid) = IK_SEEDS
            .iter()
            .map(|s| s.as_slice())
            .chain(std::iter::once(open.finger(f)))
            .map(|s| solve_finger_ik(model, f, &target, s))
            .fold(([0.0; 4], f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        if resid > IK_TOLERANCE {
            return Err(Error::Unreachable {
                finger: f.name(),
                reason: format!("closest reachable tip is {resid:.4} m from target"),
            });
        }
        closed.0[f.joint_range()].copy_from_slice(&q);
    }
    let phase = DemoTrajectory::uniform_phase(SYNTH_FRAMES);
    let frames = phase
        .iter()
        .map(|&p| {
            let s = smoothstep((p - CLOSE_ONSET) / (1.0 - CLOSE_ONSET));
            let mut q = JointVector::zeros();
            for j in 0..q.0.len() {
                q.0[j] = open[j] + s * (closed[j] - open[j]);
            }
            model.tips_in_palm(&q)
        })
        .collect();
    DemoTrajectory::new(
        frames,
        phase,
        style.clone(),
        Finger::ALL.map(|f| model.chain(f).chain_length()),
    )
}

/// Writes the `.demo` text format. Requires a uniform phase grid, which the
/// format leaves implicit.
pub fn write_demo(demo: &DemoTrajectory) -> Result<String> {
    demo.validate()?;
    let t = demo.len();
    if demo.phase != DemoTrajectory::uniform_phase(t) {
        return Err(Error::input("demo files require uniformly spaced phase"));
    }
    let mut out = String::new();
    let mask: Vec<&str> = demo.style.active_fingers.iter().map(|&a| if a { "1" } else { "0" }).collect();
    let _ = writeln!(out, "# fingertip demonstration; positions in the palm frame");
    let _ = writeln!(out, "format_version {DEMO_FORMAT_VERSION}");
    let _ = writeln!(out, "units m");
    let _ = writeln!(out, "finger_order index middle ring thumb");
    let _ = writeln!(out, "style {} {}", demo.style.id, mask.join(" "));
    let s = demo.source_scale;
    let _ = writeln!(out, "source_scale {} {} {} {}", s[0], s[1], s[2], s[3]);
    let _ = writeln!(out, "T {t}");
    for frame in &demo.frames {
        let vals: Vec<String> = frame.iter().flat_map(|p| p.iter().map(|v| v.to_string())).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    Ok(out)
}

pub fn parse_demo(text: &str) -> Result<DemoTrajectory> {
    let bad = |m: String| Error::format("demo file", m);
    let mut version = None;
    let mut style = None;
    let mut scale = None;
    let mut t_count = None;
    let mut frames = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let head = it.next().unwrap_or_default();
        let rest: Vec<&str> = it.collect();
        match head {
            "format_version" => version = rest.first().and_then(|v| v.parse::<u32>().ok()),
            "units" => {
                if rest != ["m"] {
                    return Err(bad(format!("line {}: only meters are supported", ln + 1)));
                }
            }
            "finger_order" => {
                if rest != ["index", "middle", "ring", "thumb"] {
                    return Err(bad(format!("line {}: unsupported finger order", ln + 1)));
                }
            }
            "style" => {
                if rest.len() != 5 {
                    return Err(bad(format!("line {}: style needs id and 4 flags", ln + 1)));
                }
                let mut mask = [false; NUM_FINGERS];
                for i in 0..NUM_FINGERS {
                    mask[i] = match rest[i + 1] {
                        "1" => true,
                        "0" => false,
                        o => return Err(bad(format!("line {}: bad finger flag '{o}'", ln + 1))),
                    };
                }
                style = Some(StyleSpec::new(rest[0], mask)?);
            }
            "source_scale" => {
                let v: Vec<f64> = rest.iter().map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(e.to_string()))?;
                if v.len() != NUM_FINGERS {
                    return Err(bad(format!("line {}: source_scale needs 4 values", ln + 1)));
                }
                scale = Some([v[0], v[1], v[2], v[3]]);
            }
            "T" => t_count = rest.first().and_then(|v| v.parse::<usize>().ok()),
            _ => {
                let v: Vec<f64> = line
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(format!("line {}: {e}", ln + 1)))?;
                if v.len() != 3 * NUM_FINGERS {
                    return Err(bad(format!("line {}: expected 12 values, got {}", ln + 1, v.len())));
                }
                frames.push(std::array::from_fn(|i| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])));
            }
        }
    }
    match version {
        Some(DEMO_FORMAT_VERSION) => {}
        other => return Err(bad(format!("unsupported or missing format_version {other:?}"))),
    }
    let t = t_count.ok_or_else(|| bad("missing T".into()))?;
    if frames.len() != t {
        return Err(bad(format!("header declares T = {t} but {} frames follow", frames.len())));
    }
    if t < 2 {
        return Err(bad("T must be at least 2".into()));
    }
    DemoTrajectory::new(
        frames,
        DemoTrajectory::uniform_phase(t),
        style.ok_or_else(|| bad("missing style".into()))?,
        scale.ok_or_else(|| bad("missing source_scale".into()))?,
    )
}

pub fn save_demo(demo: &DemoTrajectory, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_demo(demo)?)?;
    Ok(())
}

pub fn load_demo(path: impl AsRef<Path>) -> Result<DemoTrajectory> {
    parse_demo(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_frame() -> DemoTrajectory {
        let f0 = [Vector3::new(0.1, 0.0, 0.0); 4];
        let f1 = [Vector3::new(0.0, 0.2, -0.04); 4];
        DemoTrajectory::new(vec![f0, f1], vec![0.0, 1.0], StyleSpec::all_fingers(), [0.1; 4]).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let d = two_frame();
        assert_eq!(demo_target(&d, 0.0).unwrap(), d.frames[0]);
        assert_eq!(demo_target(&d, 1.0).unwrap(), d.frames[1]);
        let mid = demo_target(&d, 0.25).unwrap();
        for i in 0..4 {
            let expect = d.frames[0][i] * 0.75 + d.frames[1][i] * 0.25;
            assert!((mid[i] - expect).norm() < 1e-15);
        }
        assert!(demo_target(&d, 1.5).is_err());
        assert!(demo_target(&d, -0.1).is_err());
    }

    #[test]
    fn retarget_identity_and_doubling() {
        let model = HandModel::default();
        let len = Finger::ALL.map(|f| model.chain(f).chain_length());
        let mut d = two_frame();
        d.source_scale = len;
        let same = retarget_demo(&d, &model).unwrap();
        for (a, b) in same.frames.iter().zip(&d.frames) {
            for i in 0..4 {
                assert!((a[i] - b[i]).norm() < 1e-15);
            }
        }
        d.source_scale = len.map(|l| l / 2.0);
        let twice = retarget_demo(&d, &model).unwrap();
        for (a, b) in twice.frames.iter().zip(&d.frames) {
            for i in 0..4 {
                assert_relative_eq!(a[i].norm(), 2.0 * b[i].norm(), epsilon = 1e-15);
            }
        }
        d.source_scale[2] = 0.0;
        assert!(retarget_demo(&d, &model).is_err());
    }

    #[test]
    fn retarget_recorded_human_lengths_elementwise() {
        let model = HandModel::default();
        let mut d = synthesize_demo(&StyleSpec::all_fingers(), &model).unwrap();
        let human = [0.17, 0.18, 0.165, 0.12];
        d.source_scale = human;
        let r = retarget_demo(&d, &model).unwrap();
        for (fr_out, fr_in) in r.frames.iter().zip(&d.frames) {
            for i in 0..4 {
                let ratio = model.fingers[i].chain_length() / human[i];
                for k in 0..3 {
                    assert_eq!(fr_out[i][k], fr_in[i][k] * ratio);
                }
            }
        }
    }

    #[test]
    fn synthesized_all_finger_demo_converges() {
        let model = HandModel::default();
        let d = synthesize_demo(&StyleSpec::all_fingers(), &model).unwrap();
        assert_eq!(d.len(), SYNTH_FRAMES);
        for f in Finger::ALL {
            let tip = d.frames.last().unwrap()[f.index()];
            let mount = model.chain(f).mount_position();
            assert!((tip.z - GRASP_CENTER[2]).abs() < IK_TOLERANCE);
            assert!((tip.y - mount.y).abs() < IK_TOLERANCE);
            assert!((tip.x.abs() - CLOSED_STANDOFF).abs() < IK_TOLERANCE);
            assert_eq!(tip.x.signum(), mount.x.signum());
        }
        assert!(d.phase.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn inactive_fingers_frozen() {
        let model = HandModel::default();
        let style = find_style("thumb_index").unwrap();
        let d = synthesize_demo(&style, &model).unwrap();
        for fr in &d.frames {
            assert_eq!(fr[1], d.frames[0][1]);
            assert_eq!(fr[2], d.frames[0][2]);
        }
        assert_ne!(d.frames[0][0], d.frames[SYNTH_FRAMES - 1][0]);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let model = HandModel::default();
        for s in shipped_styles() {
            assert_eq!(synthesize_demo(&s, &model).unwrap(), synthesize_demo(&s, &model).unwrap());
        }
    }

    #[test]
    fn unreachable_target_names_finger() {
        let text = HandModel::default_config_text()
            .replace("limits = [-0.2, 2.0]", "limits = [-0.2, 0.1]")
            .replace("limits = [-0.1, 1.9]", "limits = [-0.1, 0.1]");
        let model = HandModel::from_toml_str(&text).unwrap();
        match synthesize_demo(&StyleSpec::all_fingers(), &model) {
            Err(Error::Unreachable { finger, .. }) => assert_eq!(finger, "index"),
            other => panic!("expected unreachable error, got {other:?}"),
        }
    }

    #[test]
    fn style_validation() {
        assert!(StyleSpec::new("x", [true, false, false, false]).is_err());
        assert!(StyleSpec::new("x", [false, false, false, true]).is_err());
        assert!(StyleSpec::new("x", [false, true, false, true]).is_ok());
        assert_eq!(shipped_styles().len(), 6);
    }

    #[test]
    fn shipped_styles_round_trip_bit_identically() {
        let model = HandModel::default();
        for s in shipped_styles() {
            let d = synthesize_demo(&s, &model).unwrap();
            let text = write_demo(&d).unwrap();
            let back = parse_demo(&text).unwrap();
            assert_eq!(back, d);
            assert_eq!(write_demo(&back).unwrap(), text);
        }
    }

    #[test]
    fn parse_rejects_bad_files() {
        let d = synthesize_demo(&StyleSpec::all_fingers(), &HandModel::default()).unwrap();
        let text = write_demo(&d).unwrap();
        assert!(parse_demo(&text.replace("T 50", "T 49")).is_err());
        assert!(parse_demo(&text.replace("format_version 1", "format_version 2")).is_err());
        assert!(parse_demo(&text.replace("units m", "units mm")).is_err());
    }

    proptest! {
        #[test]
        fn retarget_commutes_with_interpolation(phase in 0.0f64..=1.0, s in 0.05f64..0.3) {
            let model = HandModel::default();
            let mut d = synthesize_demo(&StyleSpec::all_fingers(), &model).unwrap();
            d.source_scale = [s, s * 1.1, s * 0.9, s * 0.8];
            let a = retarget_demo(&d, &model).unwrap();
            let lhs = demo_target(&a, phase).unwrap();
            let mid = demo_target(&d, phase).unwrap();
            for i in 0..4 {
                let ratio = model.fingers[i].chain_length() / d.source_scale[i];
                prop_assert!((lhs[i] - mid[i] * ratio).norm() < 1e-12);
            }
        }
    }
}
