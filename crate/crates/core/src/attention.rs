//! Landmark-seeded adaptive attention.
//!
//! Each AU has two centers derived from facial landmarks by a [`RuleTable`]. Around each center a
//! square subregion of width `zeta * side` receives weights that decay with Manhattan distance;
//! everything outside the subregions starts at zero. The maps are then refined by a small
//! per-AU convolutional branch, and the refined maps gate the shared features of each AU's local
//! branch.
//!
//! Grid point `(row, col)` sits at coordinate `(x = col, y = row)` on the attention grid, and an
//! image pixel coordinate `p` maps to grid coordinate `p * side / l`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Builder, ConvBnRelu, ConvLayer, Forward};
use crate::params::Module;
use crate::region::{PatchGrid, PlainStack};
use crate::tensor::{ConvSpec, Tensor};

/// Cells of padding removed from `pool2` and the initial maps (per side).
pub const PAD_REMOVAL_CELLS: usize = 3;
/// Cells added per side before the four 3x3/1/0 refinement convolutions.
pub const REFINE_ZOOM_CELLS: usize = 4;

/// Facial landmarks in input-image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
    pub inter_ocular: f64,
}

impl LandmarkSet {
    /// Builds a set from interleaved `x, y` coordinates, measuring the inter-ocular distance
    /// between the two given outer eye-corner landmarks.
    pub fn from_flat(coords: &[f64], eye_corners: (usize, usize)) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::Data(format!(
                "odd coordinate count {}",
                coords.len()
            )));
        }
        let points: Vec<(f64, f64)> = coords.chunks(2).map(|p| (p[0], p[1])).collect();
        let d = inter_ocular(&points, eye_corners)?;
        Ok(LandmarkSet {
            points,
            inter_ocular: d,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Euclidean distance between the two eye-corner landmarks.
pub fn inter_ocular(points: &[(f64, f64)], (a, b): (usize, usize)) -> Result<f64> {
    let n = points.len();
    if a >= n || b >= n {
        return Err(Error::Config(format!(
            "eye-corner landmarks ({a}, {b}) out of range for {n} landmarks"
        )));
    }
    let (dx, dy) = (points[a].0 - points[b].0, points[a].1 - points[b].1);
    Ok((dx * dx + dy * dy).sqrt())
}

/// What an AU center is anchored to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub enum Anchor {
    Landmark(usize),
    Midpoint(usize, usize),
}

impl TryFrom<Vec<usize>> for Anchor {
    type Error = String;

    fn try_from(v: Vec<usize>) -> std::result::Result<Self, String> {
        match v[..] {
            [i] => Ok(Anchor::Landmark(i)),
            [i, j] => Ok(Anchor::Midpoint(i, j)),
            _ => Err(format!("anchor must list one or two landmarks, got {v:?}")),
        }
    }
}

impl From<Anchor> for Vec<usize> {
    fn from(a: Anchor) -> Self {
        match a {
            Anchor::Landmark(i) => vec![i],
            Anchor::Midpoint(i, j) => vec![i, j],
        }
    }
}

impl Anchor {
    fn max_index(&self) -> usize {
        match *self {
            Anchor::Landmark(i) => i,
            Anchor::Midpoint(i, j) => i.max(j),
        }
    }
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anchor::Landmark(i) => write!(f, "{i}"),
            Anchor::Midpoint(i, j) => write!(f, "{i}+{j}"),
        }
    }
}

impl FromStr for Anchor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let idx = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad landmark index '{t}'"))
        };
        match s.split_once('+') {
            Some((a, b)) => Ok(Anchor::Midpoint(idx(a)?, idx(b)?)),
            None => Ok(Anchor::Landmark(idx(s)?)),
        }
    }
}

/// One AU center: an anchor plus an offset in inter-ocular units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub anchor: Anchor,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuRule {
    pub au: u32,
    pub centers: [CenterSpec; 2],
}

/// Per-AU center rules, one entry per detected AU in output order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleTable {
    pub rules: Vec<AuRule>,
}

impl RuleTable {
    /// Parses the text format: one record per line,
    /// `au  anchor_a dx_a dy_a  anchor_b dx_b dy_b`, where an anchor is a landmark index `i` or
    /// a midpoint `i+j`. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rules = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(err(format!("expected 7 fields, found {}", fields.len())));
            }
            let au = fields[0]
                .parse::<u32>()
                .map_err(|_| err(format!("bad AU id '{}'", fields[0])))?;
            let num = |t: &str| {
                t.parse::<f64>()
                    .map_err(|_| err(format!("bad offset '{t}'")))
            };
            let center = |k: usize| -> Result<CenterSpec> {
                Ok(CenterSpec {
                    anchor: fields[k].parse().map_err(err)?,
                    dx: num(fields[k + 1])?,
                    dy: num(fields[k + 2])?,
                })
            };
            rules.push(AuRule {
                au,
                centers: [center(1)?, center(4)?],
            });
        }
        Ok(RuleTable { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# au  anchor_a dx_a dy_a  anchor_b dx_b dy_b\n");
        for r in &self.rules {
            let [a, b] = &r.centers;
            s.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                r.au, a.anchor, a.dx, a.dy, b.anchor, b.dx, b.dy
            ));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Checks every anchor against the landmark count.
    pub fn validate(&self, n_align: usize) -> Result<()> {
        for r in &self.rules {
            for c in &r.centers {
                if c.anchor.max_index() >= n_align {
                    return Err(Error::Config(format!(
                        "AU {} references landmark {} but only {n_align} landmarks exist",
                        r.au,
                        c.anchor.max_index()
                    )));
                }
            }
        }
        Ok(())
    }

    /// A best-effort 12-AU table for the common 49-landmark layout (brows 0-9, nose 10-18,
    /// eyes 19-30, mouth 31-48). Offsets are in inter-ocular units, positive `dy` pointing down.
    pub fn default_49() -> Self {
        let text = include_str!("../config/au_rules_49.txt");
        Self::parse(text, Path::new("au_rules_49.txt")).expect("bundled rule table parses")
    }
}

/// Map-space AU centers: `centers[i] = [(x_a, y_a), (x_b, y_b)]` for AU `i`.
pub type AuCenters = Vec<[(f64, f64); 2]>;

/// Computes both centers of every AU on a `map_side x map_side` attention grid for an
/// `image_side x image_side` input. Landmarks are clamped into the image and centers into the grid.
pub fn au_centers(
    landmarks: &LandmarkSet,
    rules: &RuleTable,
    image_side: usize,
    map_side: usize,
) -> Result<AuCenters> {
    rules.validate(landmarks.len())?;
    let hi = (image_side as f64 - 1.0).max(0.0);
    let pt = |i: usize| {
        let (x, y) = landmarks.points[i];
        (x.clamp(0.0, hi), y.clamp(0.0, hi))
    };
    let scale = map_side as f64 / image_side as f64;
    let grid_hi = map_side as f64 - 1.0;
    let d = landmarks.inter_ocular;
    Ok(rules
        .rules
        .iter()
        .map(|r| {
            r.centers.map(|c| {
                let (ax, ay) = match c.anchor {
                    Anchor::Landmark(i) => pt(i),
                    Anchor::Midpoint(i, j) => {
                        let (a, b) = (pt(i), pt(j));
                        ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
                    }
                };
                let x = (ax + c.dx * d) * scale;
                let y = (ay + c.dy * d) * scale;
                (x.clamp(0.0, grid_hi), y.clamp(0.0, grid_hi))
            })
        })
        .collect())
}

/// Decaying weight `max(1 - d xi / (side zeta), 0)` at Manhattan distance `d` from a center.
pub fn decay_weight(manhattan: f64, side: usize, zeta: f64, xi: f64) -> f64 {
    (1.0 - manhattan * xi / (side as f64 * zeta)).max(0.0)
}

/// A per-AU attention grid with weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub au_index: usize,
    pub side: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }
}

/// Initial attention maps. A point belongs to a subregion when its Chebyshev distance to the
/// center is at most `zeta * side / 2`; overlapping subregions take the larger weight; points in
/// no subregion are zero.
pub fn init_attention(
    centers: &AuCenters,
    zeta: f64,
    xi: f64,
    side: usize,
) -> Result<Vec<AttentionMap>> {
    if !(zeta > 0.0) || !(xi >= 0.0) {
        return Err(Error::Config(format!(
            "attention needs zeta > 0 and xi >= 0 (got zeta={zeta}, xi={xi})"
        )));
    }
    let half = zeta * side as f64 / 2.0;
    Ok(centers
        .iter()
        .enumerate()
        .map(|(au_index, pair)| {
            let mut values: Vec<f64> = vec![0.0; side * side];
            for &(cx, cy) in pair {
                // Only rows/columns within `half` of the center can belong to the subregion.
                let lo = |c: f64| (c - half).ceil().max(0.0) as usize;
                let hi = |c: f64| ((c + half).floor().min(side as f64 - 1.0)).max(-1.0);
                let (x_hi, y_hi) = (hi(cx), hi(cy));
                if x_hi < 0.0 || y_hi < 0.0 {
                    continue;
                }
                for row in lo(cy)..=y_hi as usize {
                    for col in lo(cx)..=x_hi as usize {
                        let (dx, dy) = ((col as f64 - cx).abs(), (row as f64 - cy).abs());
                        let v = decay_weight(dx + dy, side, zeta, xi);
                        let slot = &mut values[row * side + col];
                        *slot = slot.max(v);
                    }
                }
            }
            AttentionMap {
                au_index,
                side,
                values,
            }
        })
        .collect())
}

/// Packs per-sample maps into a `[N, n_au, side, side]` tensor.
pub fn stack_maps(per_sample: &[Vec<AttentionMap>]) -> Result<Tensor> {
    let n = per_sample.len();
    let n_au = per_sample.first().map_or(0, |m| m.len());
    let side = per_sample
        .first()
        .and_then(|m| m.first())
        .map_or(0, |m| m.side);
    let mut data = Vec::with_capacity(n * n_au * side * side);
    for maps in per_sample {
        for m in maps {
            data.extend_from_slice(&m.values);
        }
    }
    Tensor::new(&[n, n_au, side, side], data)
}

/// Zoom by `(side + 2p) / side`, then center-crop back to `side`, discarding the outer `p` cells
/// of padding influence.
pub fn padding_removal(g: &mut Graph, x: Var, pad_cells: usize) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4("padding_removal")?;
    if h != w {
        return Err(Error::shape(
            "padding_removal",
            format!("map {h}x{w} is not square"),
        ));
    }
    if 2 * pad_cells >= h {
        return Err(Error::Config(format!(
            "cannot remove {pad_cells} cells of padding from a {h}x{h} map"
        )));
    }
    if pad_cells == 0 {
        return Ok(x);
    }
    let zoomed = h + 2 * pad_cells;
    let alpha = zoomed as f64 / h as f64;
    let beta = h as f64 / zoomed as f64;
    let z = g.bilinear_resize(x, alpha)?;
    g.center_crop(z, beta)
}

/// Scales the AU-loss gradient reaching a refined attention map by `lambda3`.
pub fn backprop_enhance(g: &mut Graph, refined: Var, lambda3: f64) -> Var {
    g.grad_scale(refined, lambda3)
}

/// One AU's refinement branch: zoom by `REFINE_ZOOM_CELLS` per side, three 3x3/1/0 convolutions
/// with BN and ReLU, a fourth 3x3/1/0 convolution, and a sigmoid.
#[derive(Debug, Clone)]
pub struct RefineBranch {
    pub hidden: Vec<ConvBnRelu>,
    pub last: ConvLayer,
}

impl RefineBranch {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        let ch = channels.max(1);
        let hidden = (0..3)
            .map(|i| {
                let cin = if i == 0 { 1 } else { ch };
                b.conv_bn_relu(
                    &format!("{name}.{}", i + 1),
                    Module::Attention,
                    ConvSpec::valid3(cin, ch),
                    PatchGrid::WHOLE,
                )
            })
            .collect();
        let last = b.conv(
            &format!("{name}.4.conv"),
            Module::Attention,
            ConvSpec::valid3(ch, 1),
            PatchGrid::WHOLE,
        );
        RefineBranch { hidden, last }
    }

    /// `initial` is a `[N, 1, side, side]` map; the result has the same shape.
    pub fn forward(&self, f: &mut Forward<'_>, initial: Var) -> Result<Var> {
        let (_, _, side, _) = f.graph.value(initial).dims4("refine_attention")?;
        let big = side + 2 * REFINE_ZOOM_CELLS;
        let mut x = f.graph.resize(initial, big, big)?;
        for l in &self.hidden {
            x = l.forward(f, x)?;
        }
        let x = self.last.forward(f, x)?;
        Ok(f.graph.sigmoid(x))
    }
}

/// One AU's local feature branch: three stages of a two-convolution plain block followed by
/// max pooling, applied to the attention-gated shared features.
#[derive(Debug, Clone)]
pub struct LocalBranch {
    pub stack: PlainStack,
}

impl LocalBranch {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        depth: usize,
    ) -> Self {
        LocalBranch {
            stack: PlainStack::build(b, name, Module::Attention, in_channels, widths, depth),
        }
    }

    /// `features * map` (map broadcast over channels), then the branch network.
    pub fn forward(&self, f: &mut Forward<'_>, features: Var, map: Var) -> Result<Var> {
        let x = f.graph.mul(features, map)?;
        self.stack.forward(f, x)
    }
}

/// Element-wise sum of all branch outputs.
pub fn assemble_local(g: &mut Graph, branches: &[Var]) -> Result<Var> {
    let (&first, rest) = branches
        .split_first()
        .ok_or_else(|| Error::Config("no local branches to assemble".into()))?;
    rest.iter().try_fold(first, |acc, &b| g.add(acc, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules_one(anchor: Anchor, dy: f64) -> RuleTable {
        let c = CenterSpec {
            anchor,
            dx: 0.0,
            dy,
        };
        RuleTable {
            rules: vec![AuRule {
                au: 1,
                centers: [c, c],
            }],
        }
    }

    #[test]
    fn midpoint_center_in_grid_units() {
        let lm = LandmarkSet {
            points: vec![(40.0, 40.0), (60.0, 40.0)],
            inter_ocular: 20.0,
        };
        let c = au_centers(&lm, &rules_one(Anchor::Midpoint(0, 1), 0.0), 176, 44).unwrap();
        assert_eq!(c[0][0], (12.5, 10.0));
    }

    #[test]
    fn offset_scales_with_inter_ocular() {
        let lm = LandmarkSet {
            points: vec![(40.0, 40.0)],
            inter_ocular: 40.0,
        };
        let base = au_centers(&lm, &rules_one(Anchor::Landmark(0), 0.0), 176, 44).unwrap();
        let off = au_centers(&lm, &rules_one(Anchor::Landmark(0), 0.5), 176, 44).unwrap();
        assert!((off[0][0].1 - base[0][0].1 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_rule_is_a_config_error() {
        let lm = LandmarkSet {
            points: vec![(1.0, 1.0)],
            inter_ocular: 1.0,
        };
        let err = au_centers(&lm, &rules_one(Anchor::Midpoint(0, 3), 0.0), 32, 8).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn paper_constants() {
        // zeta * side = 0.14 * 44 = 6.16
        assert_eq!(decay_weight(11.0, 44, 0.14, 0.56), 0.0);
        assert!((decay_weight(5.0, 44, 0.14, 0.56) - (1.0 - 2.8 / 6.16)).abs() < 1e-12);
        assert_eq!(decay_weight(0.0, 44, 0.14, 0.56), 1.0);
        assert_eq!(decay_weight(3.0, 44, 0.14, 0.0), 1.0);
    }

    #[test]
    fn rule_table_text_round_trip() {
        let t = RuleTable::default_49();
        assert_eq!(t.len(), 12);
        let back = RuleTable::parse(&t.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, t);
        t.validate(49).unwrap();
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = RuleTable::parse("# header\n1 0 0 0 1 0\n", Path::new("r.txt")).unwrap_err();
        assert!(err.to_string().contains("r.txt:2"), "{err}");
    }
}
