use rand::{Rng, SeedableRng};
use rigface::face3d::{FaceModel, FaceParams, Image, EXPR_DIM};

fn blur(img: &Image, r: usize) -> Image {
    if r == 0 { return img.clone(); }
    let (h, w, _) = (img.shape()[0], img.shape()[1], 3);
    let mut out = Image::zeros((h, w, 3));
    for y in 0..h { for x in 0..w { for c in 0..3 {
        let mut acc = 0.0; let mut n = 0.0;
        for dy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for dx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                acc += img[[dy, dx, c]]; n += 1.0;
            }
        }
        out[[y, x, c]] = acc / n;
    }}}
    out
}

fn main() {
    let m = FaceModel::build_template(0);
    for seed in 0..12u64 {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut truth = FaceParams::neutral();
        truth.light = [1.0, 0.3, 0.25, 0.35, 0.1, -0.15, 0.1, 0.2, -0.1];
        for e in truth.expr.iter_mut() { *e = rng.gen_range(-1.0..1.0); }
        let img = m.render(&truth, (48, 48)).unwrap().image;
        let img_blur = blur(&img, 2);
        let budget = 2000usize;
        let mut evals = 0usize;
        let mut residual = |expr: &[f64; EXPR_DIM], evals: &mut usize, blurred: bool| -> f64 {
            *evals += 1;
            let mut p = truth.clone();
            p.expr = *expr;
            let out = m.render(&p, (48, 48)).unwrap().image;
            let (a, b) = if blurred { (blur(&out, 2), img_blur.clone()) } else { (out, img.clone()) };
            (&a - &b).mapv(|v| v * v).sum() / (48.0 * 48.0 * 3.0)
        };
        let mut cur = [0.0f64; EXPR_DIM];
        let mut stage_blur = true;
        let mut f_cur = residual(&cur, &mut evals, stage_blur);
        let mut radius = [0.8f64; EXPR_DIM];
        'outer: loop {
            if stage_blur && evals > budget * 2 / 5 {
                stage_blur = false;
                f_cur = residual(&cur, &mut evals, false);
                radius = radius.map(|r: f64| r.max(0.1));
            }
            for k in 0..EXPR_DIM {
                if evals + 6 > budget { break 'outer; }
                let r = radius[k];
                let c = cur[k];
                let mut best_v = c;
                let mut best_f = f_cur;
                let mut at_edge = false;
                for v in [c - r, c - r / 2.0, c - r / 6.0, c + r / 6.0, c + r / 2.0, c + r] {
                    let mut cand = cur; cand[k] = v;
                    let f = residual(&cand, &mut evals, stage_blur);
                    if f < best_f { best_f = f; best_v = v; at_edge = (v - c).abs() > r * 0.9; }
                }
                cur[k] = best_v; f_cur = best_f;
                radius[k] = if best_v == c { (r * 0.4).max(2e-4) } else if at_edge { (r * 2.0).min(1.6) } else { r };
            }
            // Pairwise diagonal probes to escape coupled-coordinate stalls.
            let rbar = radius.iter().sum::<f64>() / EXPR_DIM as f64;
            if rbar > 1e-3 {
                for i in 0..EXPR_DIM {
                    if evals + 4 > budget { break 'outer; }
                    let j = (i + 1) % EXPR_DIM;
                    for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                        let mut cand = cur;
                        cand[i] += si * radius[i];
                        cand[j] += sj * radius[j];
                        let f = residual(&cand, &mut evals, stage_blur);
                        if f < f_cur { f_cur = f; cur = cand; }
                    }
                }
            }
            if radius.iter().all(|&r| r <= 2e-4) {
                if f_cur <= 1e-11 && !stage_blur { break; }
                if stage_blur { stage_blur = false; f_cur = residual(&cur, &mut evals, false); }
                radius = [1.0f64; EXPR_DIM];
            }
        }
        let linf = cur.iter().zip(&truth.expr).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        println!("seed {seed}: r_fit {f_cur:.3e} linf {linf:.4} evals {evals}");
    }
}
