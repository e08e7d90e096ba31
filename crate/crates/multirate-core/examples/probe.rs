use multirate_core::dynamics::{small_angle_linearization, zoh_discretize, PlantModel, SegwayParams};
use multirate_core::sets::{sign_template, HPolytope};
use multirate_core::qp::*;
use nalgebra::{DMatrix, DVector};

fn main() {
    let plant = PlantModel::segway(SegwayParams::default());
    let pm = small_angle_linearization(&plant);
    let dm = zoh_discretize(&pm, 0.1).unwrap();
    let k = DMatrix::from_row_slice(1, 4, &[0.0, -7.3989, -10.435, -3.7039]);
    let acl = &dm.a + &dm.b * &k;
    let reduced = acl.view((1, 1), (3, 3)).into_owned();
    let dist = HPolytope::axis_box(&[0.1, 0.05, 0.01]);
    let at = reduced.transpose();
    let steps = 80;
    let series = |d: &DVector<f64>| -> f64 {
        let mut w = d.clone();
        let mut total = 0.0;
        for _ in 0..steps { total += dist.support(&w).unwrap(); w = &at * &w; }
        total * 1.02
    };
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for d in sign_template(3, 1) { rows.push((d.clone(), series(&d))); }
    {
        let mut h = DMatrix::zeros(6, 3);
        let mut o = DVector::zeros(6);
        for (i, (d, off)) in rows.iter().enumerate() { h.row_mut(i).copy_from(&d.transpose()); o[i] = *off; }
        let rp = HPolytope::new(h, o).unwrap();
        for r in 0..rp.num_rows() {
            let d = rp.normals().row(r).transpose();
            let probe = &at * &d;
            let v = rp.support(&probe).unwrap();
            if v + dist.support(&d).unwrap() > rp.offsets()[r] + 1e-9 {
                let vv: DVector<f64> = probe.normalize();
                let off = series(&vv);
                rows.push((vv, off));
            }
        }
    }
    let nr = rows.len();
    println!("// LP data: {nr} rows");
    print!("let h = [");
    for (d, _) in &rows { print!("[{:.17e},{:.17e},{:.17e}],", d[0], d[1], d[2]); }
    println!("];");
    print!("let o = [");
    for (_, off) in &rows { print!("{:.17e},", off); }
    println!("];");
    let d0 = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
    let probe = &at * &d0;
    println!("let d = [{:.17e},{:.17e},{:.17e}];", probe[0], probe[1], probe[2]);
}
