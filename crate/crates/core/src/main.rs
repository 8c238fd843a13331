fn main() {
    std::process::exit(mmsfe::cli::run(std::env::args_os()));
}
