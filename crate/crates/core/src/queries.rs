//! Instance queries from vote-shifted tokens and context queries anchored at
//! unmoved token positions.

use crate::config::Config;
use crate::encoder::SceneTokens;
use crate::geom::{farthest_point_sampling, SetAbstraction};
use crate::numerics::{Activation, Graph, Init, Mlp, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    Instance,
    Context,
}

#[derive(Clone, Debug)]
pub struct QuerySet {
    pub kind: QueryKind,
    pub positions: Var,
    pub feats: Var,
    /// Row of `p_enc` each query was sampled from (before voting, for instances).
    pub origin: Vec<usize>,
}

/// Vote offsets `[Δp; Δf]` predicted from the encoded features.
#[derive(Clone, Copy, Debug)]
pub struct VoteOffsets {
    pub dp: Var,
    pub df: Var,
}

#[derive(Clone, Debug)]
pub struct QueryGenerator {
    pub vote: Mlp,
    pub sa_o: SetAbstraction,
    pub sa_c: SetAbstraction,
    pub n_ctx_seeds: usize,
}

impl QueryGenerator {
    pub fn new_instance(init: &mut Init<'_>, cfg: &Config) -> (Mlp, SetAbstraction) {
        let d = cfg.d_model;
        init.scoped("queries", |i| {
            let vote = Mlp::new(i, "vote", &[d, d, 3 + d], Activation::Gelu);
            let sa_o = SetAbstraction::new(
                i,
                "sa_o",
                cfg.n_inst,
                cfg.inst_radius,
                cfg.inst_nsample,
                d,
                &[d, d],
            );
            (vote, sa_o)
        })
    }

    pub fn new_context(init: &mut Init<'_>, cfg: &Config) -> SetAbstraction {
        let d = cfg.d_model;
        init.scoped("queries", |i| {
            SetAbstraction::new(
                i,
                "sa_c",
                cfg.n_ctx,
                cfg.ctx_radius,
                cfg.ctx_nsample,
                d,
                &[d, d],
            )
        })
    }

    pub fn votes<T: Real>(&self, g: &mut Graph<'_, T>, st: &SceneTokens) -> VoteOffsets {
        let out = self.vote.forward(g, st.f_enc);
        let d = g.shape(st.f_enc)[1];
        VoteOffsets {
            dp: g.slice_cols(out, 0, 3),
            df: g.slice_cols(out, 3, d),
        }
    }

    /// SA over vote-shifted points and features; FPS runs on the shifted positions.
    pub fn instance<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        st: &SceneTokens,
    ) -> (QuerySet, VoteOffsets) {
        let v = self.votes(g, st);
        let xyz = g.add(st.p_enc, v.dp);
        let feats = g.add(st.f_enc, v.df);
        let out = self.sa_o.forward(g, xyz, Some(feats));
        let qs = QuerySet {
            kind: QueryKind::Instance,
            positions: out.centers,
            feats: out.feats,
            origin: out.center_idx,
        };
        (qs, v)
    }

    /// FPS seeds over `p_enc`, FPS again over the seeds for the centers, then
    /// grouping over all of `p_enc` without moving any coordinate.
    pub fn context<T: Real>(&self, g: &mut Graph<'_, T>, st: &SceneTokens) -> QuerySet {
        self.context_at(g, st.p_enc, st.f_enc)
    }

    pub fn context_at<T: Real>(&self, g: &mut Graph<'_, T>, p_enc: Var, f_enc: Var) -> QuerySet {
        let (ns, nc) = (self.n_ctx_seeds, self.sa_c.npoint);
        let centers = {
            let p = g.value(p_enc).clone();
            g.decide(|| {
                let seeds = farthest_point_sampling(&p, ns, 0).expect("seed count exceeds tokens");
                let sp = p.gather_rows(&seeds);
                let pick =
                    farthest_point_sampling(&sp, nc, 0).expect("context count exceeds seeds");
                pick.into_iter().map(|k| seeds[k]).collect()
            })
        };
        let out = self.sa_c.forward_at(g, p_enc, Some(f_enc), &centers);
        QuerySet {
            kind: QueryKind::Context,
            positions: out.centers,
            feats: out.feats,
            origin: centers,
        }
    }
}
