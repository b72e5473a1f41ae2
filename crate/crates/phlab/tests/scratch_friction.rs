use phlab::core::integrator::Discretization;
use phlab::experiments::{tank_friction_study, ExperimentId, ExperimentSpec, Scale};

#[test]
fn friction_probe() {
    let mut spec = ExperimentSpec::new(ExperimentId::TankIntegrators, Scale::Desk);
    spec.replicates = Some(1);
    spec.base_seed = 40;
    let discs = [Discretization::Euler, Discretization::Midpoint, Discretization::Srk4];
    let study = tank_friction_study(&spec, &discs, 3000, 1.0 / 30.0, 0.0, 1000).unwrap();
    for (disc, reps) in &study.per_disc {
        println!("{}: {:?}", disc.name(), reps);
    }
}
