//! A freshly built model behaves exactly like its per-frame image model.

use candle_core::{DType, Device, Tensor};
use t2v_inflate::config::RunConfig;
use t2v_inflate::{Mode, T2VModel};

fn max_diff(a: &Tensor, b: &Tensor) -> t2v_inflate::Result<f32> {
    Ok((a - b)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?)
}

fn main() -> t2v_inflate::Result<()> {
    let cfg = RunConfig::smoke().model;
    let model = T2VModel::build(cfg.clone(), 0)?;
    let (f, c, h, w) = (cfg.frames, cfg.channels, cfg.height, cfg.width);
    let x = Tensor::randn(0f32, 1.0, (1, f, c, h, w), &Device::Cpu)?.to_dtype(DType::F32)?;

    println!("mapping network: max |M(x) - x| = {}", max_diff(&model.mapping_forward(&x)?, &x)?);

    let text = model.tokenize_caption("blue circle moving down")?;
    let full = model.generate_frame_tokens(&text, Mode::Full)?;
    let image = model.generate_frame_tokens(&text, Mode::ImageOnly)?;
    let (eps_full, _) = model.forward(&x, &[500], &full, Mode::Full, false)?;
    let (eps_image, _) = model.forward(&x, &[500], &image, Mode::ImageOnly, false)?;
    let frames = x.reshape((f, c, h, w))?;
    let eps_spatial = model.spatial_forward(&frames, &vec![500; f], &image.per_frame)?.unsqueeze(0)?;

    println!("full vs image-only:  {}", max_diff(&eps_full, &eps_image)?);
    println!("full vs per-frame:   {}", max_diff(&eps_full, &eps_spatial)?);
    println!("inflation parameters: {}", model.inflation_params().len());
    println!("spatial parameters:   {}", model.spatial_params().len());
    Ok(())
}
