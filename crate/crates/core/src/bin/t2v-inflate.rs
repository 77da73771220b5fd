fn main() {
    std::process::exit(t2v_inflate::cli::run(std::env::args_os()));
}
