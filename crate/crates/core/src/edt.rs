//! Exact Euclidean distance transform on anisotropic grids (separable lower
//! envelope of parabolas).

/// Squared distance in mm from each voxel to the nearest `true` voxel, or
/// `f64::INFINITY` when there is none. Data is x-fastest.
pub fn edt_squared(features: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    assert_eq!(features.len(), dims[0] * dims[1] * dims[2], "feature length mismatch");
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        if n < 2 {
            continue;
        }
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for u in 0..dims[a] {
            for v in 0..dims[b] {
                let base = u * stride[a] + v * stride[b];
                line.clear();
                line.extend((0..n).map(|i| d[base + i * stride[axis]]));
                lower_envelope(&line, spacing[axis], &mut out);
                for (i, &x) in out.iter().enumerate() {
                    d[base + i * stride[axis]] = x;
                }
            }
        }
    }
    d
}

/// `out[q] = min_p f[p] + ((q − p)·s)²` in O(n).
fn lower_envelope(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    let sites: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let pos = |p: usize| p as f64 * s;
    // Intersection of the parabolas rooted at p and q (p < q).
    let cross = |p: usize, q: usize| {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    for &q in &sites[1..] {
        let mut x = cross(*v.last().unwrap(), q);
        while x <= *z.last().unwrap() {
            v.pop();
            z.pop();
            if v.is_empty() {
                break;
            }
            x = cross(*v.last().unwrap(), q);
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            v.push(q);
            z.push(x);
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for q in 0..n {
        let xq = pos(q);
        while z[k + 1] < xq {
            k += 1;
        }
        let dx = xq - pos(v[k]);
        out.push(f[v[k]] + dx * dx);
    }
}
