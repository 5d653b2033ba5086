use alsparse_core::datasets::{load_mnist, MnistSpec};
use alsparse_core::inner::{init_inner, run_inner, InitSnapshot, InnerCaps, ProblemContext};
use alsparse_core::linalg::column_norms;
use alsparse_core::network::{forward, HyperParams, NetworkShape, Params};
use alsparse_core::outer::{init_params, schedule_step, update_multipliers, IalmConfig, InitScheme};
use alsparse_core::penalty::{compute_theta, primal_residual, Multipliers};

fn colstats(p: &Params) -> String {
    let mut s = String::new();
    for (l, w) in p.weights.iter().enumerate() {
        let n = column_norms(w);
        let mx = (0..n.len()).map(|j| n[j]).fold(0.0f64, f64::max);
        let nz = (0..n.len()).filter(|&j| n[j] > 1e-9).count();
        s.push_str(&format!(" W{}:max={:.2e},nz={}/{}", l + 1, mx, nz, n.len()));
    }
    s
}

fn vstats(aux: &alsparse_core::network::AuxState) -> String {
    let mut s = String::new();
    for l in 1..=aux.v.layer_count() {
        let data = aux.v.layer(l);
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        s.push_str(&format!(" v{l}:var={var:.2e}"));
    }
    s
}

fn main() {
    let dir = std::path::Path::new("/root/crate/data/digits");
    let spec = MnistSpec::from_dir(dir, 1000, 0);
    let (train, _test) = load_mnist(&spec).unwrap();
    let shape = NetworkShape::new(vec![784, 100, 50, 10], 1000).unwrap();
    let mut hp = HyperParams::defaults_for(&shape);
    // knobs under test
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let lw: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let rho0: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let eps0: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    hp.beta = vec![beta; 3];
    hp.lambda_w = lw;
    hp.lambda_v = 1e-8;
    let mut cfg = IalmConfig::defaults_for(&shape);
    cfg.rho0 = rho0;
    cfg.eps0 = eps0;
    cfg.caps.max_inner = 120;
    cfg.caps = InnerCaps { max_inner: 25, max_wb_iters: 200 };
    cfg.init = InitScheme::FanIn;

    let ctx = ProblemContext::new(shape.clone(), &train).unwrap();
    let mut params = init_params(&shape, 0, cfg.init);
    let aux0 = forward(&params, &train, &hp, &shape).unwrap();
    let theta = compute_theta(&train, &params, &aux0, &hp).theta;
    let mut xi = Multipliers::zeros(&shape);
    let mut rho = cfg.rho0;
    let mut eps = cfg.eps0;
    let mut history = Vec::new();
    println!("theta={theta:.3}  init:{}", colstats(&params));
    let mut stored: Option<InitSnapshot> = None;
    for k in 1..=25 {
        let snap = init_inner(&params, stored.as_ref(), rho, &xi, &train, &hp, &shape, theta).unwrap();
        stored = Some(snap.clone());
        let (state, rep) = run_inner(&ctx, &snap, &xi, rho, &train, &hp, theta, eps, &cfg.caps).unwrap();
        params = state.params;
        let r = primal_residual(&params, &state.aux, &train);
        history.push(r.norm_sq().sqrt());
        xi = update_multipliers(&xi, rho, &r);
        let te = alsparse_core::metrics::sum_sq_err(&params, &train, hp.alpha) / 1000.0;
        let acc = alsparse_core::metrics::accuracy(&params, &train, hp.alpha);
        println!("k={k:2} rho={rho:.2e} eps={eps:.2e} L={:+.3} inner={} res={:.2e} TrainErr={te:.4} acc={acc:.3}{}{}",
            state.l_value, rep.iterations, rep.final_residual, colstats(&params), vstats(&state.aux));
        let (r2, e2) = schedule_step(k, cfg.gamma, cfg.eta1, cfg.eta2, cfg.eta3, cfg.eta4, rho, eps, &history, xi.norm()).unwrap();
        rho = r2;
        eps = e2;
    }
}
