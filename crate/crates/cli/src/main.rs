use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uvsplat::bench::{run_bench, BenchConfig};
use uvsplat::decoder::{self, TeacherDecoder};
use uvsplat::distill::{distill, sample_poses, DistillConfig};
use uvsplat::eval::{backdrop, compare_frames, render_posed};
use uvsplat::io::{self, Avatar, DecoderFile, SynthConfig};
use uvsplat::metrics::{crop_pair, BinaryMask, Image, Metrics};
use uvsplat::quant::{quantize, quantized_decode_for_gaussians};
use uvsplat::raster::{render, FrameBuffer, RenderOptions};
use uvsplat::sharing::build_lut;
use uvsplat::splat::{Camera, Corrective, Pose};
use uvsplat::Error;

#[derive(Parser)]
#[command(
    name = "uvsplat",
    version,
    about = "UV-space Gaussian avatars: synthesis, distillation, quantization, rendering"
)]
struct Cli {
    /// Worker threads for rendering and decoding (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic avatar with its teacher decoder.
    Synth(SynthArgs),
    /// Write seeded random poses to a text file.
    Poses(PosesArgs),
    /// Render an avatar in its rest pose.
    Render(RenderArgs),
    /// Pose an avatar and render one frame.
    Animate(AnimateArgs),
    /// Distill the avatar's teacher into a linear decoder.
    Distill(DistillArgs),
    /// Build the corrective-sharing lookup table for an avatar.
    Lut(LutArgs),
    /// Quantize a linear decoder to int8 weights and int16 activations.
    Quantize(QuantizeArgs),
    /// Compare two PPM images.
    Compare(CompareArgs),
    /// Time the decoders and the renderer.
    Bench(BenchArgs),
}

#[derive(Args)]
struct CameraArgs {
    /// Camera as fx,fy,cx,cy,yaw,pitch,tx,ty,tz (angles in degrees, t = camera center).
    #[arg(long, value_parser = parse_camera, allow_hyphen_values = true)]
    camera: Option<[f64; 9]>,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
}

fn parse_camera(s: &str) -> Result<[f64; 9], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 9 comma-separated numbers, got {}", v.len()))
}

impl CameraArgs {
    fn camera(&self) -> uvsplat::Result<Camera> {
        match &self.camera {
            None => io::default_camera(self.width, self.height),
            Some(v) => Camera::from_yaw_pitch(
                v[0],
                v[1],
                v[2],
                v[3],
                v[4].to_radians(),
                v[5].to_radians(),
                [v[6], v[7], v[8]],
                self.width,
                self.height,
            ),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    joints: usize,
    /// UV grid side length.
    #[arg(long, default_value_t = 256)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrective sharing factor; the teacher emits a grid this many times smaller.
    #[arg(long)]
    share: Option<usize>,
    /// Make the teacher an affine function of the pose.
    #[arg(long)]
    linear_teacher: bool,
}

#[derive(Args)]
struct PosesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    joints: usize,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    avatar: PathBuf,
    #[command(flatten)]
    cam: CameraArgs,
    /// Output image (binary PPM).
    #[arg(long)]
    out: PathBuf,
    /// Also write the alpha channel (binary PGM).
    #[arg(long)]
    alpha: Option<PathBuf>,
    /// Composite over the evaluation backdrop instead of black.
    #[arg(long)]
    backdrop: bool,
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    avatar: PathBuf,
    /// Pose file; when absent a single seeded random pose is used.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Float or quantized decoder file. Without it, correctives come from the teacher
    /// when `--teacher` is given and are zero otherwise.
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long, conflicts_with = "decoder")]
    teacher: bool,
    #[command(flatten)]
    cam: CameraArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<PathBuf>,
    #[arg(long)]
    backdrop: bool,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    avatar: PathBuf,
    /// Training poses; when absent `--frames` poses are sampled with `--seed`.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pose PCA dimension.
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// SH PCA dimension.
    #[arg(long, default_value_t = 6)]
    sh_d: usize,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the int8/int16 quantized decoder, calibrated on the training poses.
    #[arg(long)]
    quantized_out: Option<PathBuf>,
}

#[derive(Args)]
struct LutArgs {
    #[arg(long)]
    avatar: PathBuf,
    #[arg(long, default_value_t = 4)]
    share: usize,
    /// Write the avatar back with the table attached.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    decoder: PathBuf,
    /// Calibration poses; when absent `--frames` poses are sampled with `--seed`.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Prediction (PPM).
    a: PathBuf,
    /// Reference (PPM).
    b: PathBuf,
    /// Reference segmentation (PGM); both images are cropped to its bounding box.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Avatar to benchmark; a default synthetic avatar is generated when absent.
    #[arg(long)]
    avatar: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 10)]
    warmups: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 6)]
    sh_d: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_avatar(path: &Path) -> uvsplat::Result<Avatar> {
    io::load_avatar(&io::read_file(path)?)
}

fn load_poses(path: &Path) -> uvsplat::Result<Vec<Pose>> {
    let bytes = io::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Malformed {
        section: "poses".into(),
        message: "not UTF-8 text".into(),
    })?;
    io::poses_from_str(&text)
}

fn poses_or_sampled(path: &Option<PathBuf>, n_joints: usize, frames: usize, seed: u64) -> uvsplat::Result<Vec<Pose>> {
    match path {
        Some(p) => load_poses(p),
        None => Ok(sample_poses(n_joints, frames, seed)),
    }
}

fn teacher_of(a: &Avatar) -> uvsplat::Result<TeacherDecoder> {
    let cfg = a
        .teacher
        .ok_or_else(|| Error::Validation("avatar file carries no teacher decoder".into()))?;
    TeacherDecoder::new(cfg)
}

fn write_frame(fb: &FrameBuffer, out: &Path, alpha: &Option<PathBuf>, with_backdrop: bool) -> uvsplat::Result<()> {
    let rgb = if with_backdrop { backdrop(fb)?.to_pnm() } else { fb.to_ppm() };
    io::write_file(out, &rgb)?;
    if let Some(a) = alpha {
        io::write_file(a, &fb.alpha_pgm())?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> uvsplat::Result<()> {
    let s = io::synth_avatar(&SynthConfig {
        n_joints: a.joints,
        grid: a.grid,
        seed: a.seed,
        share: a.share,
        linear_teacher: a.linear_teacher,
    })?;
    io::write_file(&a.out, &io::save_avatar(&s.avatar))?;
    println!("gaussians={}", s.avatar.splats.len());
    println!("grid={}x{}", s.avatar.splats.grid_h, s.avatar.splats.grid_w);
    println!("joints={}", s.avatar.skeleton.n_joints());
    println!("teacher_grid={}x{}", s.teacher.cfg.out_h, s.teacher.cfg.out_w);
    Ok(())
}

fn cmd_poses(a: &PosesArgs) -> uvsplat::Result<()> {
    let poses = sample_poses(a.joints, a.count, a.seed);
    io::write_file(&a.out, io::poses_to_string(&poses).as_bytes())?;
    println!("poses={}", poses.len());
    println!("dim={}", Pose::dim_for(a.joints));
    Ok(())
}

fn cmd_render(a: &RenderArgs, opts: &RenderOptions) -> uvsplat::Result<()> {
    let avatar = load_avatar(&a.avatar)?;
    let fb = render(&avatar.splats, &a.cam.camera()?, opts);
    write_frame(&fb, &a.out, &a.alpha, a.backdrop)?;
    println!("coverage={:.6}", coverage(&fb));
    Ok(())
}

fn coverage(fb: &FrameBuffer) -> f64 {
    fb.alpha.iter().filter(|v| **v > 0.5).count() as f64 / fb.alpha.len().max(1) as f64
}

fn cmd_animate(a: &AnimateArgs, opts: &RenderOptions) -> uvsplat::Result<()> {
    let avatar = load_avatar(&a.avatar)?;
    let n_joints = avatar.skeleton.n_joints();
    let poses = poses_or_sampled(&a.poses, n_joints, a.frame + 1, a.seed)?;
    let pose = poses
        .get(a.frame)
        .ok_or_else(|| Error::Validation(format!("frame {} out of range for {} poses", a.frame, poses.len())))?;
    let cam = a.cam.camera()?;
    let sp = &avatar.splats;
    let teacher_corr = |t: &TeacherDecoder| decoder::teacher_gaussian_correctives(&t.decode(pose)?, &sp.mask, sp.grid_h, sp.grid_w);
    let corr: Option<Vec<Corrective>> = match (&a.decoder, a.teacher) {
        (Some(path), _) => Some(match io::load_any_decoder(&io::read_file(path)?)? {
            DecoderFile::Float(ld) => decoder::decode_for_gaussians(&ld, pose)?,
            DecoderFile::Quantized(q) => {
                let out = quantized_decode_for_gaussians(&q, pose)?;
                println!("saturated={}", out.saturated);
                out.correctives
            }
        }),
        (None, true) => Some(teacher_corr(&teacher_of(&avatar)?)?),
        (None, false) => None,
    };
    let fb = render_posed(&avatar, corr.as_deref(), pose, &cam, opts)?;
    write_frame(&fb, &a.out, &a.alpha, a.backdrop)?;
    println!("coverage={:.6}", coverage(&fb));
    if !a.teacher && avatar.teacher.is_some() {
        let reference = render_posed(&avatar, Some(&teacher_corr(&teacher_of(&avatar)?)?), pose, &cam, opts)?;
        println!("{}", prefixed("teacher_", &compare_frames(&fb, &reference)?));
    }
    Ok(())
}

fn prefixed(prefix: &str, m: &Metrics) -> String {
    m.to_string().lines().map(|l| format!("{prefix}{l}")).collect::<Vec<_>>().join("\n")
}

fn cmd_distill(a: &DistillArgs) -> uvsplat::Result<()> {
    let avatar = load_avatar(&a.avatar)?;
    let teacher = teacher_of(&avatar)?;
    let poses = poses_or_sampled(&a.poses, avatar.skeleton.n_joints(), a.frames, a.seed)?;
    let cfg = DistillConfig {
        d: a.d,
        sh_d: a.sh_d,
        holdout: a.holdout,
        seed: a.seed,
    };
    let sp = &avatar.splats;
    let (ld, report) = distill(&teacher, &sp.mask, sp.grid_h, sp.grid_w, &poses, &cfg)?;
    io::write_file(&a.out, &io::save_decoder(&ld))?;
    println!("{report}");
    if let Some(qpath) = &a.quantized_out {
        let (train, _) = uvsplat::distill::split_frames(poses.len(), cfg.holdout, cfg.seed);
        let calib: Vec<Pose> = train.iter().map(|&i| poses[i].clone()).collect();
        let q = quantize(&ld, &calib)?;
        io::write_file(qpath, &io::save_quantized(&q))?;
        println!("activation_scale={:e}", q.activation_scale);
        println!("zero_columns={}", q.zero_columns);
    }
    Ok(())
}

fn cmd_lut(a: &LutArgs) -> uvsplat::Result<()> {
    let mut avatar = load_avatar(&a.avatar)?;
    let sp = &avatar.splats;
    let lut = build_lut(&sp.mask, sp.grid_h, sp.grid_w, a.share)?;
    let n_corr = (sp.grid_h / a.share) * (sp.grid_w / a.share);
    let mut used = vec![false; n_corr];
    for &i in &lut {
        used[i as usize] = true;
    }
    println!("gaussians={}", lut.len());
    println!("correctives={n_corr}");
    println!("correctives_used={}", used.iter().filter(|u| **u).count());
    println!("reduction={:.2}x", lut.len() as f64 / n_corr as f64);
    if let Some(out) = &a.out {
        avatar.lut = Some(lut);
        io::write_file(out, &io::save_avatar(&avatar))?;
    }
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs) -> uvsplat::Result<()> {
    let ld = io::load_decoder(&io::read_file(&a.decoder)?)?;
    let n_joints = Pose::n_joints_for_dim(ld.pose_dim)
        .ok_or_else(|| Error::Validation(format!("pose dimension {} does not match any joint count", ld.pose_dim)))?;
    let calib = poses_or_sampled(&a.poses, n_joints, a.frames, a.seed)?;
    let q = quantize(&ld, &calib)?;
    io::write_file(&a.out, &io::save_quantized(&q))?;
    println!("weights={}", q.weights.len());
    println!("activation_scale={:e}", q.activation_scale);
    println!("zero_columns={}", q.zero_columns);
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> uvsplat::Result<()> {
    let pa = Image::from_pnm(&io::read_file(&a.a)?)?;
    let pb = Image::from_pnm(&io::read_file(&a.b)?)?;
    let m = match &a.mask {
        Some(path) => {
            let mask = BinaryMask::from_image(&Image::from_pnm(&io::read_file(path)?)?, 0.5);
            let (ca, cb) = crop_pair(&pa, &pb, &mask)?;
            Metrics::compute(&ca, &cb)?
        }
        None => Metrics::compute(&pa, &pb)?,
    };
    println!("{m}");
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> uvsplat::Result<()> {
    let avatar = match &a.avatar {
        Some(p) => load_avatar(p)?,
        None => {
            io::synth_avatar(&SynthConfig {
                seed: a.seed,
                ..Default::default()
            })?
            .avatar
        }
    };
    let cfg = BenchConfig {
        warmups: a.warmups,
        reps: a.reps,
        d: a.d,
        sh_d: a.sh_d,
        render_size: a.size,
        seed: a.seed,
    };
    println!("{}", run_bench(&avatar, &cfg)?);
    Ok(())
}

fn run(cli: &Cli) -> uvsplat::Result<()> {
    let opts = RenderOptions::default();
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Poses(a) => cmd_poses(a),
        Cmd::Render(a) => cmd_render(a, &opts),
        Cmd::Animate(a) => cmd_animate(a, &opts),
        Cmd::Distill(a) => cmd_distill(a),
        Cmd::Lut(a) => cmd_lut(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not configure {n} workers: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}
