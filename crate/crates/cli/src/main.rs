fn main() {
    std::process::exit(lidarsplat_cli::run(std::env::args_os()));
}
