fn main() {
    std::process::exit(mmbseg::cli::run(std::env::args_os()));
}
