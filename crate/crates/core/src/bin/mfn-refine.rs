fn main() {
    std::process::exit(mfn_refine::cli::run_command(std::env::args_os()));
}
