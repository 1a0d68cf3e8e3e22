use ivqte::cdf::{grid, trim_support};
use ivqte::compliers::Cells;
use ivqte::counterfactual::{build_maps_on_grid, SystemTables};
use ivqte::dgp::{self, simulate};
use ivqte::effects::{potential_cdf_pooled, qte};

fn run(label: &str, endo: Vec<f64>, n: usize) {
    let mut design = dgp::example_i(2, 22).unwrap();
    design.config.utility.endogeneity = endo;
    let data = simulate(&design.config, n).unwrap();
    let cells = Cells::from_dataset(&data).unwrap();
    let p = cells.propensity_matrix().unwrap();
    let window = trim_support(&data.outcomes(), 0.005).unwrap();
    let reporting = grid::uniform(&window, 256);
    let solver_grid = grid::uniform(&window, 255 * 4 + 1);
    let tables =
        SystemTables::from_data(&cells, &p, &design.monotonicity, &solver_grid, 0.01).unwrap();
    let maps = build_maps_on_grid(&tables, &reporting).unwrap();
    let m20 = maps.get(2, 0);
    let m21 = maps.get(2, 1);
    print!("{label}: phi_2,0 err at y=0.5,1.5,2.5: ");
    for probe in [0.5f64, 1.5, 2.5] {
        print!("{:+.3} ", m20.eval_clamped(probe).0 - (probe - 2.0));
    }
    print!("| phi_2,1 err: ");
    for probe in [0.5f64, 1.5, 2.5] {
        print!("{:+.3} ", m21.eval_clamped(probe).0 - (probe - 1.0));
    }
    let weights: Vec<f64> = (0..3).map(|z| cells.z_count(z) as f64).collect();
    let mut cdfs = Vec::new();
    for s in 0..=2usize {
        cdfs.push(potential_cdf_pooled(s, &maps, &cells, &p, &weights, &reporting).unwrap().0);
    }
    print!("| qte(2,0) err at .25/.5/.75: ");
    for tau in [0.25, 0.5, 0.75] {
        match qte(&cdfs[2], &cdfs[0], tau) {
            Ok(v) => print!("{:+.3} ", v - 2.0),
            Err(_) => print!("ERR "),
        }
    }
    println!();
}

fn main() {
    run("endo=0   n=60k ", vec![0.0, 0.0, 0.0], 60_000);
    run("default  n=60k ", vec![0.0, 0.15, 0.3], 60_000);
    run("default  n=240k", vec![0.0, 0.15, 0.3], 240_000);
}
