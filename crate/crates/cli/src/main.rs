fn main() {
    std::process::exit(densecorr_cli::run(std::env::args_os()));
}
