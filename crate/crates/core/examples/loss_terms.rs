//! The four training objectives on small hand-built inputs.

use candle_core::{Device, Tensor};
use t2v_inflate::losses::{
    dc_loss, reg_loss, simple_loss, total_loss, trs_loss_maps, LossParts, LossWeights, NegativeQueue, DEFAULT_TAU,
};

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn main() -> t2v_inflate::Result<()> {
    let dev = &Device::Cpu;
    let eps = Tensor::new(&[0.5f64, -1.0, 0.25, 2.0], dev)?;
    let pred = Tensor::new(&[0.0f64, -1.0, 0.5, 1.0], dev)?;
    println!("simple  {:.4}", value(&simple_loss(&pred, &eps)?));

    for t in [0, 250, 500, 999] {
        println!("reg(t={t:>3})  {:.4}", value(&reg_loss(&pred, &eps, t, 1000)?));
    }

    // One decoder layer, (B=1, F=3, heads=1, 2x2 map): a flip then a repeat.
    let maps = Tensor::new(&[1.0f64, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], dev)?.reshape((1, 3, 1, 2, 2))?;
    println!("trs     {:.4}", value(&trs_loss_maps(&[maps])?));

    let mut queue = NegativeQueue::new(8)?;
    queue.push(&Tensor::new(&[[0.0f64, 1.0, 0.0], [0.0, 0.0, 1.0]], dev)?, &[1, 2])?;
    let z1 = Tensor::new(&[1.0f64, 0.1, 0.0], dev)?;
    let z2 = Tensor::new(&[0.9f64, 0.0, 0.1], dev)?;
    println!("dc      {:.4}", value(&dc_loss(&z1, &z2, &queue, DEFAULT_TAU)?));

    let parts = LossParts {
        simple: 0.05,
        reg: 0.002,
        trs: 0.3,
        dc: -8.0,
    };
    let b = total_loss(parts, LossWeights::default())?;
    println!("total   {:.4}  ({})", b.total, serde_json::to_string(&b).unwrap());
    Ok(())
}
