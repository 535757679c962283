//! Set abstraction: FPS centers, ball-query groups, shared point MLP, max-pool.

use crate::numerics::{Activation, Graph, Init, Mlp, Real, Var};

use super::sampling::{ball_query, farthest_point_sampling};

#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub npoint: usize,
    pub radius: f64,
    pub nsample: usize,
    /// Applied to `[relative xyz; feats]` with an activation after every layer.
    /// `None` pools the raw inputs.
    pub mlp: Option<Mlp>,
}

/// Pooled output of a set-abstraction layer.
#[derive(Clone, Debug)]
pub struct SaOutput {
    pub center_idx: Vec<usize>,
    pub centers: Var,
    pub feats: Var,
    /// `npoint·nsample` grouped input rows.
    pub groups: Vec<usize>,
}

impl SetAbstraction {
    /// `dims` are the hidden and output widths; the input width is `3 + in_feats`.
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        npoint: usize,
        radius: f64,
        nsample: usize,
        in_feats: usize,
        dims: &[usize],
    ) -> Self {
        let mlp = if dims.is_empty() {
            None
        } else {
            let mut all = vec![3 + in_feats];
            all.extend_from_slice(dims);
            Some(Mlp::new(init, name, &all, Activation::Gelu))
        };
        SetAbstraction {
            npoint,
            radius,
            nsample,
            mlp,
        }
    }

    pub fn out_dim(&self, in_feats: usize) -> usize {
        self.mlp.as_ref().map_or(3 + in_feats, |m| m.out_dim())
    }

    /// FPS from row 0 picks the centers, then groups and pools.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, xyz: Var, feats: Option<Var>) -> SaOutput {
        let npoint = self.npoint;
        let center_idx = {
            let pts = g.value(xyz).clone();
            g.decide(|| {
                farthest_point_sampling(&pts, npoint, 0).expect("npoint exceeds point count")
            })
        };
        self.forward_at(g, xyz, feats, &center_idx)
    }

    /// Groups around the given rows of `xyz` instead of running FPS.
    pub fn forward_at<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xyz: Var,
        feats: Option<Var>,
        center_idx: &[usize],
    ) -> SaOutput {
        let centers = g.gather_rows(xyz, center_idx);
        let groups = {
            let (r, ns) = (self.radius, self.nsample);
            let cv = g.value(centers).clone();
            let pv = g.value(xyz).clone();
            g.decide(|| ball_query(&cv, &pv, r, ns).indices)
        };
        let rep: Vec<usize> = (0..center_idx.len())
            .flat_map(|c| std::iter::repeat_n(c, self.nsample))
            .collect();
        let gx = g.gather_rows(xyz, &groups);
        let cx = g.gather_rows(centers, &rep);
        let rel = g.sub(gx, cx);
        let input = match feats {
            Some(f) => {
                let gf = g.gather_rows(f, &groups);
                g.concat_cols(&[rel, gf])
            }
            None => rel,
        };
        let h = match &self.mlp {
            Some(mlp) => {
                let h = mlp.forward(g, input);
                mlp.act.apply(g, h)
            }
            None => input,
        };
        let rows: Vec<usize> = (0..groups.len()).collect();
        let pooled = g.group_max(h, &rows, self.nsample);
        SaOutput {
            center_idx: center_idx.to_vec(),
            centers,
            feats: pooled,
            groups,
        }
    }
}
