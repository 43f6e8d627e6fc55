//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use basepar::actm::NetworkParams;

pub struct OracleStep {
    pub n: Vec<f64>,
    pub q: Vec<f64>,
    pub inflow: f64,
    pub e: Vec<f64>,
    pub o: Vec<f64>,
    pub s: Vec<f64>,
}

/// Plain loops over the textbook formulas, one quantity at a time.
pub fn oracle_step(p: &NetworkParams, n: &[f64], q: &[f64], dm: f64, d: &[f64], mu: &[f64]) -> OracleStep {
    let cells = p.cells.len();
    let mut e = vec![0.0; cells];
    let mut m = 0;
    for i in 0..cells {
        let c = &p.cells[i];
        if !c.has_onramp {
            continue;
        }
        let mut v = (q[i] + d[i]).min(c.xi * (c.capacity_nbar - n[i]));
        if c.metered {
            v = v.min(mu[m]);
            m += 1;
        }
        e[i] = v;
    }
    let space = |i: usize| {
        let c = &p.cells[i];
        (c.capacity_nbar - n[i] - c.blend_alpha * e[i]) * c.eta_idling
    };
    let mut o = vec![0.0; cells];
    for i in 0..cells {
        let c = &p.cells[i];
        let b = c.split_beta;
        let mut v = (1.0 - b) * (n[i] + c.blend_alpha * e[i]) * c.eta_moving;
        if i + 1 < cells {
            v = v.min(space(i + 1));
        }
        v = v.min(c.sat_mainline_obar);
        if b > 0.0 && b < 1.0 {
            v = v.min((1.0 - b) / b * c.sat_offramp_sbar);
        }
        o[i] = v;
    }
    let mut s = vec![0.0; cells];
    for i in 0..cells {
        let c = &p.cells[i];
        if c.has_offramp && c.split_beta > 0.0 {
            s[i] = c.split_beta / (1.0 - c.split_beta) * o[i];
        }
    }
    let inflow = dm.min(space(0));
    let mut n2 = vec![0.0; cells];
    let mut q2 = vec![0.0; cells];
    for i in 0..cells {
        let up = if i == 0 { inflow } else { o[i - 1] };
        n2[i] = n[i] + up + e[i] - o[i] - s[i];
        q2[i] = if p.cells[i].has_onramp { q[i] + d[i] - e[i] } else { 0.0 };
    }
    OracleStep {
        n: n2,
        q: q2,
        inflow,
        e,
        o,
        s,
    }
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}
