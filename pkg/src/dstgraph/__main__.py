from dstgraph.cli import main

raise SystemExit(main())
