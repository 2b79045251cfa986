//! Training-only cross-modal alignment: cosine alignment of the two class
//! tokens (CGA) and alignment of spatial-attention response maps (SAM).
//! Nothing here is needed at inference.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::vit::{Modality, ParamId};

/// Default weight of the local (response map) alignment term.
pub const DEFAULT_LAMBDA: f64 = 0.3;

/// Which loss terms are live. Mirrors the ablation rows: WL-only
/// baseline, + global alignment, + global and local alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignMode {
    WlOnly,
    Cga,
    CgaSam,
}

impl AlignMode {
    pub const ALL: [AlignMode; 3] = [AlignMode::WlOnly, AlignMode::Cga, AlignMode::CgaSam];

    pub fn uses_nbi(self) -> bool {
        self != AlignMode::WlOnly
    }

    pub fn uses_sam(self) -> bool {
        self == AlignMode::CgaSam
    }

    /// Names of the live terms, in breakdown order.
    pub fn live_terms(self) -> &'static [&'static str] {
        match self {
            AlignMode::WlOnly => &["cls_wl"],
            AlignMode::Cga => &["cls_wl", "cls_nbi", "global_align"],
            AlignMode::CgaSam => &["cls_wl", "cls_nbi", "global_align", "local_align"],
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::WlOnly => "wl_only",
            AlignMode::Cga => "cga",
            AlignMode::CgaSam => "cga_sam",
        })
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wl_only" => Ok(AlignMode::WlOnly),
            "cga" => Ok(AlignMode::Cga),
            "cga_sam" => Ok(AlignMode::CgaSam),
            other => Err(Error::Config(format!("unknown mode '{other}' (wl_only|cga|cga_sam)"))),
        }
    }
}

/// Query/key projections of one spatial-attention site. `level` is the
/// block whose (externally normed) output the site reads; the last block is
/// the default and only validated site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamParams {
    pub level: usize,
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
}

/// Global-to-local affinity of one image: a distribution over its patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub modality: Modality,
    pub values: Vec<f64>,
}

impl ResponseMap {
    pub fn new(modality: Modality, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Numerical(
                "response map has negative or non-finite entries".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!("response map sums to {total}")));
        }
        Ok(Self { modality, values })
    }

    /// One `index probability` line per patch.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{i} {p:.12e}\n"))
            .collect()
    }
}

/// `1 - cos(c_w, c_n)`, in `[0, 2]`.
pub fn cga_loss(g: &mut Graph, c_w: Var, c_n: Var) -> Result<Var> {
    let cos = g.cosine_similarity(c_w, c_n)?;
    let neg = g.scale(cos, -1.0);
    Ok(g.offset(neg, 1.0))
}

/// `softmax((c W_q)(F W_k)^T)` over the N patches, returned as `1 x N`.
/// There is no temperature: the logits are used as is.
pub fn spatial_attention(g: &mut Graph, patches: Var, class_feature: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let q = g.matmul(class_feature, w_q)?;
    let k = g.matmul(patches, w_k)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    Ok(g.softmax(logits))
}

/// `lambda * (1 - cos(R_w, R_n))`, in `[0, lambda]` for probability maps.
pub fn local_loss(g: &mut Graph, r_w: Var, r_n: Var, lambda: f64) -> Result<Var> {
    if g.value(r_w).numel() != g.value(r_n).numel() {
        return Err(Error::Shape(format!(
            "response maps of length {} and {}",
            g.value(r_w).numel(),
            g.value(r_n).numel()
        )));
    }
    let cos = g.cosine_similarity(r_w, r_n)?;
    let dist = g.scale(cos, -lambda);
    Ok(g.offset(dist, lambda))
}

/// Alignment inputs taken at one site.
#[derive(Debug, Clone, Copy)]
pub struct LevelFeatures {
    pub c_w: Var,
    pub c_n: Var,
    pub r_w: Option<Var>,
    pub r_n: Option<Var>,
}

/// Graph outputs of one paired forward pass.
#[derive(Debug, Clone)]
pub struct PairOutputs {
    pub logits_w: Var,
    pub logits_n: Option<Var>,
    pub levels: Vec<LevelFeatures>,
}

/// The four loss terms and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls_wl: f64,
    pub cls_nbi: f64,
    pub global_align: f64,
    pub local_align: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.cls_wl,
            self.cls_nbi,
            self.global_align,
            self.local_align,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, o: &LossBreakdown) {
        self.cls_wl += o.cls_wl;
        self.cls_nbi += o.cls_nbi;
        self.global_align += o.global_align;
        self.local_align += o.local_align;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            cls_wl: self.cls_wl * s,
            cls_nbi: self.cls_nbi * s,
            global_align: self.global_align * s,
            local_align: self.local_align * s,
            total: self.total * s,
        }
    }
}

/// Graph handles of the assembled loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls_wl: Var,
    pub cls_nbi: Option<Var>,
    pub global_align: Option<Var>,
    pub local_align: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossBreakdown {
            cls_wl: g.value(self.cls_wl).item(),
            cls_nbi: val(self.cls_nbi),
            global_align: val(self.global_align),
            local_align: val(self.local_align),
            total: g.value(self.total).item(),
        }
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(if terms.len() > 1 {
        g.scale(acc, 1.0 / terms.len() as f64)
    } else {
        acc
    })
}

/// `L = CE(H(c_w)) + CE(H(c_n)) + L_global + L_local`, with the terms the
/// mode excludes left out. With several alignment sites each alignment
/// term is the mean over sites, which keeps its range.
pub fn total_loss(g: &mut Graph, out: &PairOutputs, label: usize, mode: AlignMode, lambda: f64) -> Result<LossVars> {
    let cls_wl = g.cross_entropy_logits(out.logits_w, &[label])?;
    if !mode.uses_nbi() {
        return Ok(LossVars {
            cls_wl,
            cls_nbi: None,
            global_align: None,
            local_align: None,
            total: cls_wl,
        });
    }
    let logits_n = out
        .logits_n
        .ok_or_else(|| Error::Contract(format!("mode {mode} needs the NBI pass")))?;
    if out.levels.is_empty() {
        return Err(Error::Contract("no alignment sites".into()));
    }
    let cls_nbi = g.cross_entropy_logits(logits_n, &[label])?;
    let globals = out
        .levels
        .iter()
        .map(|l| cga_loss(g, l.c_w, l.c_n))
        .collect::<Result<Vec<_>>>()?;
    let global = mean_of(g, &globals)?;
    let mut total = g.add(cls_wl, cls_nbi)?;
    total = g.add(total, global)?;
    let mut local_align = None;
    if mode.uses_sam() {
        let mut locals = Vec::with_capacity(out.levels.len());
        for l in &out.levels {
            let (Some(r_w), Some(r_n)) = (l.r_w, l.r_n) else {
                return Err(Error::Contract("cga_sam mode needs response maps".into()));
            };
            locals.push(local_loss(g, r_w, r_n, lambda)?);
        }
        let local = mean_of(g, &locals)?;
        total = g.add(total, local)?;
        local_align = Some(local);
    }
    Ok(LossVars {
        cls_wl,
        cls_nbi: Some(cls_nbi),
        global_align: Some(global),
        local_align,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn vec_var(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn cga_examples() {
        let mut g = Graph::new();
        let u = vec_var(&mut g, &[0.3, -1.0, 2.0]);
        let nu = vec_var(&mut g, &[-0.3, 1.0, -2.0]);
        let l = cga_loss(&mut g, u, u).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);
        let l = cga_loss(&mut g, u, nu).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-6);
        let a = vec_var(&mut g, &[1.0, 0.0]);
        let b = vec_var(&mut g, &[0.0, 1.0]);
        let l = cga_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn zero_projections_give_uniform_map() {
        let mut g = Graph::new();
        let n = 64;
        let d = 6;
        let f = g.constant(Tensor::full(&[n, d], 0.7));
        let c = vec_var(&mut g, &[1.0; 6]);
        let wq = g.constant(Tensor::zeros(&[d, d]));
        let wk = g.constant(Tensor::zeros(&[d, d]));
        let r = spatial_attention(&mut g, f, c, wq, wk).unwrap();
        assert_eq!(g.value(r).shape(), &[1, n]);
        for p in g.value(r).data() {
            assert!((p - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn local_loss_examples() {
        let mut g = Graph::new();
        let r = vec_var(&mut g, &[0.2, 0.3, 0.5]);
        let l = local_loss(&mut g, r, r, 0.3).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);
        let a = vec_var(&mut g, &[1.0, 0.0, 0.0]);
        let b = vec_var(&mut g, &[0.0, 0.0, 1.0]);
        let l = local_loss(&mut g, a, b, 0.3).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-12);
        let short = vec_var(&mut g, &[0.5, 0.5]);
        assert!(matches!(local_loss(&mut g, a, short, 0.3), Err(Error::Shape(_))));
    }

    #[test]
    fn modes_parse_and_nest() {
        for m in AlignMode::ALL {
            assert_eq!(m.to_string().parse::<AlignMode>().unwrap(), m);
        }
        let sets: Vec<_> = AlignMode::ALL.iter().map(|m| m.live_terms()).collect();
        for w in sets.windows(2) {
            assert!(w[0].len() < w[1].len());
            assert!(w[0].iter().all(|t| w[1].contains(t)));
        }
        assert!("both".parse::<AlignMode>().is_err());
    }

    #[test]
    fn response_map_validation_and_text() {
        assert!(ResponseMap::new(Modality::Wl, vec![0.5, 0.6]).is_err());
        let r = ResponseMap::new(Modality::Nbi, vec![0.25, 0.75]).unwrap();
        let text = r.to_text();
        let rows: Vec<_> = text.lines().collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].starts_with("1 7.5"));
    }
}
